"""Experiment configuration: a flat JSON document of documented keys."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ValidationError


@dataclass(frozen=True)
class ExperimentConfig:
    # image / model dims (must agree with the frozen fixtures)
    H: int = 32
    W: int = 32
    C: int = 3
    d: int = 32
    patch: int = 4
    heads: int = 2
    # data
    num_classes: int = 6
    samples_per_class: int = 60
    test_samples_per_class: int = 15
    data_seed: int = 101
    test_seed: int = 202
    schedule: str = "2-2"
    # detection
    tau: float = 0.3
    M: int = 30
    # adapters
    rank: int = 8
    scaling: float | None = None
    # prompt generation
    Q_m: int = 256
    m: int = 6
    d_p: int = 32
    h: int = 128
    # optimisation
    lr: float = 3e-3
    wd: float = 0.05
    lr_power: float = 0.9
    epochs: int = 5
    batch_size: int = 8
    gamma_pos: float = 0.0
    gamma_neg: float = 2.0
    asl_weight: float = 1.0
    seed: int = 3
    # inference / metrics
    binarize_threshold: float = 0.5
    background_in_miou: bool = True
    parallel_inference: bool = False
    probe_images: int = 10
    # fixtures; None selects the packaged checkpoints
    backbone_path: str | None = None
    segmenter_path: str | None = None

    def __post_init__(self):
        problems = []
        positive = ["H", "W", "C", "d", "patch", "heads", "num_classes", "samples_per_class",
                    "test_samples_per_class", "M", "rank", "Q_m", "m", "d_p", "h", "epochs", "batch_size"]
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                problems.append(f"{name} must be a positive integer (got {v!r})")
        if not (isinstance(self.tau, (int, float)) and 0 < self.tau < 1):
            problems.append(f"tau must lie in (0, 1) (got {self.tau!r})")
        if isinstance(self.rank, int) and isinstance(self.d, int) and self.rank > self.d:
            problems.append(f"rank must be <= d (got rank={self.rank}, d={self.d})")
        for name in ("lr", "wd", "gamma_pos", "gamma_neg", "asl_weight", "lr_power"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
                problems.append(f"{name} must be a non-negative number (got {v!r})")
        if self.scaling is not None and not isinstance(self.scaling, (int, float)):
            problems.append(f"scaling must be a number or null (got {self.scaling!r})")
        if not isinstance(self.schedule, str):
            problems.append(f"schedule must be a string (got {self.schedule!r})")
        if problems:
            raise ValidationError("invalid config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return type(self).from_dict({**self.to_dict(), **changes})
