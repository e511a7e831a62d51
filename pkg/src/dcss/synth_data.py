"""Synthetic shape segmentation data, class-incremental schedules and dataset IO."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import binio
from .errors import ScheduleError, ValidationError

SHAPE_KINDS = ("disk", "square", "triangle", "ring", "cross", "bar")
SAMPLE_MAGIC = b"DCSS"
MIN_MASK_FRACTION = 0.01
MAX_OVERLAP_FRACTION = 0.3


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 6
    H: int = 32
    W: int = 32
    C: int = 3
    samples_per_class: int = 20
    shapes: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        # JSON round trips turn int keys into strings
        shapes = {int(k): str(v) for k, v in (self.shapes or {}).items()}
        if not shapes and isinstance(self.num_classes, int) and self.num_classes >= 2:
            shapes = {k: SHAPE_KINDS[(k - 1) % len(SHAPE_KINDS)] for k in range(1, self.num_classes + 1)}
        object.__setattr__(self, "shapes", shapes)

    def validate(self) -> None:
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes!r}")
        for name in ("H", "W"):
            if getattr(self, name) < 16:
                raise ValidationError(f"{name} must be >= 16, got {getattr(self, name)!r}")
        if self.C < 1:
            raise ValidationError(f"C must be >= 1, got {self.C!r}")
        if self.samples_per_class < 1:
            raise ValidationError(f"samples_per_class must be >= 1, got {self.samples_per_class!r}")
        missing = [k for k in range(1, self.num_classes + 1) if k not in self.shapes]
        if missing:
            raise ValidationError(f"shapes: no shape kind for class ids {missing}")
        unknown = {v for v in self.shapes.values() if v not in SHAPE_KINDS}
        if unknown:
            raise ValidationError(f"shapes: unknown shape kinds {sorted(unknown)}")

    def class_names(self) -> dict[int, str]:
        """Text name per class id; repeated shape kinds get a numeric suffix."""
        names, seen = {}, {}
        for k in range(1, self.num_classes + 1):
            kind = self.shapes[k]
            seen[kind] = seen.get(kind, 0) + 1
            names[k] = kind if seen[kind] == 1 else f"{kind}{seen[kind]}"
        return names

    def to_json(self) -> dict:
        d = asdict(self)
        d["shapes"] = {str(k): v for k, v in self.shapes.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSpec":
        known = {"num_classes", "H", "W", "C", "samples_per_class", "shapes", "seed"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown dataset spec keys: {unknown}")
        return cls(**d)


@dataclass
class SegSample:
    image: np.ndarray  # H x W x C float32 in [0, 1]
    label: np.ndarray  # H x W uint16, 0 = background
    sample_id: str

    def present_classes(self) -> set[int]:
        return {int(v) for v in np.unique(self.label) if v != 0}


@dataclass(frozen=True)
class TaskSpec:
    task_index: int
    class_ids: tuple

    def to_json(self):
        return {"task_index": self.task_index, "class_ids": list(self.class_ids)}


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple
    pattern: str = ""

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def task(self, t: int) -> TaskSpec:
        return self.tasks[t - 1]

    def classes_up_to(self, t: int) -> list[int]:
        return sorted(c for task in self.tasks[:t] for c in task.class_ids)

    def to_json(self):
        return {"pattern": self.pattern, "tasks": [t.to_json() for t in self.tasks]}

    @classmethod
    def from_json(cls, d):
        return cls(
            tasks=tuple(TaskSpec(int(t["task_index"]), tuple(t["class_ids"])) for t in d["tasks"]),
            pattern=d.get("pattern", ""),
        )


def class_color(k: int, num_classes: int, C: int) -> np.ndarray:
    phase = (k - 1) / num_classes
    return np.array([0.5 + 0.4 * math.cos(2 * math.pi * (phase + c / max(C, 3))) for c in range(C)])


def render_shape(kind: str, cy: float, cx: float, size: float, H: int, W: int) -> np.ndarray:
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = y - cy, x - cx
    if kind == "disk":
        return dy**2 + dx**2 <= size**2
    if kind == "square":
        return (np.abs(dy) <= 0.8 * size) & (np.abs(dx) <= 0.8 * size)
    if kind == "triangle":
        top = cy - size
        return (y >= top) & (y <= cy + size) & (np.abs(dx) <= 0.5 * (y - top) + 0.5)
    if kind == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= size**2) & (r2 >= (0.55 * size) ** 2)
    if kind == "cross":
        arm = 0.3 * size
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= size)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= size))
    if kind == "bar":
        return (np.abs(dy) <= 0.35 * size) & (np.abs(dx) <= 1.2 * size)
    raise ValidationError(f"unknown shape kind {kind!r}")


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _place(rng, kind, spec, painted, min_px):
    H, W = spec.H, spec.W
    base = min(H, W) / 32.0
    for _ in range(50):
        size = rng.uniform(5.0, 8.0) * base
        margin = 1.2 * size + 1
        cy = rng.uniform(margin, H - 1 - margin)
        cx = rng.uniform(margin, W - 1 - margin)
        mask = render_shape(kind, cy, cx, size, H, W)
        area = mask.sum()
        if area < min_px:
            continue
        if (mask & painted).sum() > MAX_OVERLAP_FRACTION * area:
            continue
        return mask
    return None


def make_sample(spec: DatasetSpec, index: int, primary: int) -> SegSample:
    rng = _sample_rng(spec.seed, index)
    H, W, C = spec.H, spec.W, spec.C
    min_px = math.ceil(MIN_MASK_FRACTION * H * W)
    others = [k for k in range(1, spec.num_classes + 1) if k != primary]
    n_extra = int(rng.integers(0, 3))
    extra = [int(k) for k in rng.choice(others, size=min(n_extra, len(others)), replace=False)]

    bg = rng.uniform(0.1, 0.4, size=C)
    image = np.broadcast_to(bg, (H, W, C)).copy()
    label = np.zeros((H, W), dtype=np.uint16)
    painted = np.zeros((H, W), dtype=bool)
    for k in [primary] + extra:
        mask = _place(rng, spec.shapes[k], spec, painted, min_px)
        if mask is None:
            if k == primary:
                raise RuntimeError(f"could not place primary shape for sample {index}")
            continue
        color = class_color(k, spec.num_classes, C) + rng.normal(0.0, 0.04, size=C)
        # later shapes may occlude earlier ones; keep each visible mask above the floor
        trial = label.copy()
        trial[mask] = k
        if any((trial == j).sum() < min_px for j in np.unique(trial) if j != 0):
            continue
        label = trial
        image[mask] = color
        painted |= mask
    image += rng.normal(0.0, 0.04, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(image=image, label=label, sample_id=f"s{index:05d}")


def generate_dataset(spec: DatasetSpec, max_workers: int | None = None) -> list[SegSample]:
    spec.validate()
    jobs = [
        (i * spec.num_classes + (k - 1), k)
        for i in range(spec.samples_per_class)
        for k in range(1, spec.num_classes + 1)
    ]
    jobs.sort()
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            return list(pool.map(lambda j: make_sample(spec, *j), jobs))
    return [make_sample(spec, index, primary) for index, primary in jobs]


def build_schedule(num_classes: int, pattern: str) -> TaskSchedule:
    """Parse a ``"B-S"`` incremental pattern, or ``"joint"`` for one task holding every class."""
    if pattern == "joint":
        return TaskSchedule((TaskSpec(1, tuple(range(1, num_classes + 1))),), pattern)
    try:
        base, step = (int(p) for p in pattern.split("-"))
    except ValueError:
        raise ScheduleError(f"pattern must look like 'B-S', got {pattern!r}") from None
    if base < 1 or step < 1 or base >= num_classes:
        raise ScheduleError(f"pattern {pattern!r} invalid for {num_classes} classes")
    rest = num_classes - base
    if rest % step:
        raise ScheduleError(f"remaining {rest} classes not divisible by step {step} in {pattern!r}")
    tasks = [TaskSpec(1, tuple(range(1, base + 1)))]
    for i in range(rest // step):
        lo = base + i * step + 1
        tasks.append(TaskSpec(i + 2, tuple(range(lo, lo + step))))
    return TaskSchedule(tuple(tasks), pattern)


def relabel_overlapped(sample: SegSample, task: TaskSpec) -> SegSample:
    keep = np.isin(sample.label, np.asarray(task.class_ids, dtype=sample.label.dtype))
    label = np.where(keep, sample.label, 0).astype(sample.label.dtype)
    return replace(sample, label=label)


def task_data(samples: list[SegSample], task: TaskSpec) -> list[SegSample]:
    """Training set of one task: images with any current-class pixel, relabeled."""
    wanted = set(task.class_ids)
    return [relabel_overlapped(s, task) for s in samples if s.present_classes() & wanted]


def class_agnostic_pairs(samples: list[SegSample]) -> list[tuple[np.ndarray, np.ndarray]]:
    """(image, binary mask) per visible object; class identity is discarded."""
    pairs = []
    for s in samples:
        for k in sorted(s.present_classes()):
            pairs.append((s.image, s.label == k))
    return pairs


def write_sample(path, sample: SegSample) -> None:
    H, W, C = sample.image.shape
    with open(path, "wb") as f:
        binio.write_magic(f, SAMPLE_MAGIC)
        for v in (H, W, C):
            binio.write_u32(f, v)
        binio.write_array(f, sample.image, "<f4")
        binio.write_array(f, sample.label, "<u2")


def read_sample(path, sample_id: str | None = None) -> SegSample:
    with open(path, "rb") as f:
        binio.read_magic(f, SAMPLE_MAGIC)
        H, W, C = (binio.read_u32(f) for _ in range(3))
        image = binio.read_array(f, (H, W, C), "<f4").astype(np.float32)
        label = binio.read_array(f, (H, W), "<u2").astype(np.uint16)
    return SegSample(image=image, label=label, sample_id=sample_id or Path(path).stem)


def write_label_map(path, label: np.ndarray) -> None:
    """Label-only variant of the sample layout (C = 0, no image payload)."""
    H, W = label.shape
    with open(path, "wb") as f:
        binio.write_magic(f, SAMPLE_MAGIC)
        for v in (H, W, 0):
            binio.write_u32(f, v)
        binio.write_array(f, label, "<u2")


def read_label_map(path) -> np.ndarray:
    with open(path, "rb") as f:
        binio.read_magic(f, SAMPLE_MAGIC)
        H, W, C = (binio.read_u32(f) for _ in range(3))
        if C:
            binio.read_array(f, (H, W, C), "<f4")
        return binio.read_array(f, (H, W), "<u2").astype(np.uint16)


def save_dataset(directory, spec: DatasetSpec, samples: list[SegSample],
                 schedule: TaskSchedule | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        fname = f"{s.sample_id}.bin"
        write_sample(directory / fname, s)
        entries.append({"sample_id": s.sample_id, "file": fname})
    manifest = {
        "spec": spec.to_json(),
        "samples": entries,
        "schedule": schedule.to_json() if schedule is not None else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_dataset(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    spec = DatasetSpec.from_json(manifest["spec"])
    samples = [read_sample(directory / e["file"], e["sample_id"]) for e in manifest["samples"]]
    schedule = manifest.get("schedule")
    return spec, samples, (TaskSchedule.from_json(schedule) if schedule else None)
