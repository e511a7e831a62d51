"""Per-class phrase banks, a deterministic stub text encoder and image-conditioned aggregation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import binio
from .errors import DegenerateInputError, ValidationError

ADJECTIVES = (
    "small", "large", "red", "blue", "green", "bright", "dark", "thin", "thick", "round",
    "sharp", "smooth", "solid", "hollow", "tiny", "huge", "pale", "vivid", "flat", "bold",
    "centered", "tilted", "compact", "wide", "narrow", "soft", "crisp", "plain", "glossy",
    "matte", "faded",
)

BANK_MAGIC = b"DCSS"
PERTURBATION_NORM = 0.3


def phrases_for_class(class_name: str, M: int = 30) -> list[str]:
    """M adjective phrases followed by the bare class name."""
    if not class_name or not class_name.strip():
        raise ValidationError("class_name must be non-empty")
    if M < 1:
        raise ValidationError(f"M must be >= 1, got {M}")
    name = class_name.strip()
    phrases = []
    for i in range(M):
        adj = ADJECTIVES[i % len(ADJECTIVES)]
        rep = i // len(ADJECTIVES)
        phrases.append(f"{adj} {name}" if rep == 0 else f"{adj} {name} {rep + 1}")
    phrases.append(name)
    return phrases


def _stable_seed(*parts: str) -> int:
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class StubTextEncoder:
    """Deterministic phrase -> unit vector map standing in for a pretrained text encoder.

    Each class name gets an anchor; names listed in ``vocabulary`` get mutually
    orthogonal anchors (Gram-Schmidt over seeded Gaussians, in list order), any
    other name a seeded Gaussian direction.  A phrase is its anchor plus a
    phrase-specific perturbation of norm 0.3, re-normalized.
    """

    def __init__(self, d: int = 32, vocabulary: Sequence[str] = (), seed: int = 0):
        if len(vocabulary) > d:
            raise ValidationError(f"vocabulary of {len(vocabulary)} names exceeds d={d}")
        self.d = d
        self.seed = seed
        self.vocabulary = tuple(vocabulary)
        self._anchors: dict[str, np.ndarray] = {}
        basis: list[np.ndarray] = []
        for name in self.vocabulary:
            v = self._gaussian("anchor", name)
            for b in basis:
                v = v - (v @ b) * b
            v /= np.linalg.norm(v)
            basis.append(v)
            self._anchors[name] = v

    def _gaussian(self, *parts: str) -> np.ndarray:
        rng = np.random.default_rng(_stable_seed(str(self.seed), *parts))
        return rng.standard_normal(self.d)

    def class_token(self, phrase: str) -> str:
        words = phrase.split()
        for n in range(len(words), 0, -1):
            for start in range(len(words) - n + 1):
                cand = " ".join(words[start:start + n])
                if cand in self._anchors:
                    return cand
        # templated phrases end in the name, optionally followed by a repeat index
        if len(words) > 1 and words[-1].isdigit():
            return words[-2]
        return words[-1]

    def anchor(self, name: str) -> np.ndarray:
        if name not in self._anchors:
            v = self._gaussian("anchor", name)
            self._anchors[name] = v / np.linalg.norm(v)
        return self._anchors[name]

    def __call__(self, phrase: str) -> np.ndarray:
        return self.encode(phrase)

    def encode(self, phrase: str) -> np.ndarray:
        if not phrase or not phrase.strip():
            raise ValidationError("phrase must be non-empty")
        phrase = " ".join(phrase.split())
        a = self.anchor(self.class_token(phrase))
        p = self._gaussian("phrase", phrase)
        p = p - (p @ a) * a
        v = a + PERTURBATION_NORM * p / np.linalg.norm(p)
        return v / np.linalg.norm(v)


_default_encoder: StubTextEncoder | None = None


def default_encoder() -> StubTextEncoder:
    global _default_encoder
    if _default_encoder is None:
        from .synth_data import SHAPE_KINDS
        _default_encoder = StubTextEncoder(32, SHAPE_KINDS)
    return _default_encoder


def encode_phrase(phrase: str, encoder: Callable[[str], np.ndarray] | None = None) -> np.ndarray:
    enc = encoder or default_encoder()
    v = np.asarray(enc(phrase), dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise DegenerateInputError(f"encoder returned a zero vector for {phrase!r}")
    return v / n


@dataclass(frozen=True)
class PhraseEmbeddingBank:
    class_id: int
    phrases: tuple
    embeddings: np.ndarray  # (M+1) x d, unit rows

    def __post_init__(self):
        g = np.asarray(self.embeddings, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != len(self.phrases):
            raise ValidationError("embeddings must have one row per phrase")
        norms = np.linalg.norm(g, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError("bank rows must be unit-norm")
        g.setflags(write=False)
        object.__setattr__(self, "embeddings", g)

    @property
    def M(self) -> int:
        return len(self.phrases) - 1


def build_bank(class_id: int, class_name: str, M: int = 30, encoder=None) -> PhraseEmbeddingBank:
    phrases = phrases_for_class(class_name, M)
    g = np.stack([encode_phrase(p, encoder) for p in phrases])
    return PhraseEmbeddingBank(class_id, tuple(phrases), g)


@dataclass(frozen=True)
class AggregationResult:
    scores: np.ndarray
    weights: np.ndarray
    embedding: np.ndarray


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


def aggregate(bank: PhraseEmbeddingBank, cls_token) -> AggregationResult:
    v = np.asarray(cls_token, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateInputError("cls token must be a finite non-zero vector")
    g = bank.embeddings
    scores = (g @ v) / (np.linalg.norm(g, axis=1) * norm)
    weights = softmax(scores)
    return AggregationResult(scores, weights, weights @ g)


def aggregate_batch(banks: torch.Tensor, cls: torch.Tensor) -> torch.Tensor:
    """Differentiable batch form.  banks: (c, M+1, d); cls: (B, d) -> E: (B, c, d)."""
    cls_unit = cls / cls.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    g_unit = banks / banks.norm(dim=-1, keepdim=True)
    scores = torch.einsum("bd,cmd->bcm", cls_unit, g_unit)
    alpha = torch.softmax(scores, dim=-1)
    return torch.einsum("bcm,cmd->bcd", alpha, banks)


def save_banks(directory, banks: Sequence[PhraseEmbeddingBank]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for bank in banks:
        fname = f"bank_{bank.class_id}.bin"
        rows, cols = bank.embeddings.shape
        with open(directory / fname, "wb") as f:
            binio.write_magic(f, BANK_MAGIC)
            for v in (rows, cols, 1):
                binio.write_u32(f, v)
            binio.write_array(f, bank.embeddings, "<f4")
        manifest.append({"class_id": bank.class_id, "phrases": list(bank.phrases), "file": fname})
    (directory / "banks.json").write_text(json.dumps(manifest, indent=2))


def load_banks(directory) -> dict[int, PhraseEmbeddingBank]:
    directory = Path(directory)
    banks = {}
    for entry in json.loads((directory / "banks.json").read_text()):
        with open(directory / entry["file"], "rb") as f:
            binio.read_magic(f, BANK_MAGIC)
            rows, cols, _ = (binio.read_u32(f) for _ in range(3))
            g = binio.read_array(f, (rows, cols), "<f4").astype(np.float64)
        banks[entry["class_id"]] = PhraseEmbeddingBank(entry["class_id"], tuple(entry["phrases"]), g)
    return banks
