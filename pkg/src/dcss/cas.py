"""Class-agnostic promptable mask decoder, its one-off pretraining, and mask aggregation.

The decoder mirrors the shape of a two-way-transformer mask decoder at toy
scale: prompt tokens and image tokens attend to each other, the image grid is
upsampled 4x with transposed convolutions, and a hypernetwork vector read from
the pooled prompts turns the upsampled features into per-pixel logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import binio, kernels
from .backbone import Grounder, VisualTokens, encode_image
from .errors import StateError, ValidationError
from .lora import module_checksum
from .losses import seg_loss_from_logits

CASM_MAGIC = b"CASM"
BINARIZE_THRESHOLD = 0.5


@dataclass
class MaskPrediction:
    mask: np.ndarray  # H x W probabilities
    confidence: float
    logits: np.ndarray | None = None


class PromptableSegmenter(Protocol):
    """Plug-in surface for an external promptable model (raw image instead of tokens)."""

    def segment(self, image: np.ndarray, prompts: np.ndarray) -> MaskPrediction: ...


class _Attn(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ln = nn.LayerNorm(d)

    def forward(self, q, kv):
        return self.ln(q + self.attn(q, kv, kv, need_weights=False)[0])


class TwoWayBlock(nn.Module):
    def __init__(self, d, heads, mlp):
        super().__init__()
        self.p2x = _Attn(d, heads)
        self.mlp = nn.Sequential(nn.Linear(d, mlp), nn.GELU(), nn.Linear(mlp, d))
        self.ln = nn.LayerNorm(d)
        self.x2p = _Attn(d, heads)

    def forward(self, P, X):
        P = self.p2x(P, X)
        P = self.ln(P + self.mlp(P))
        X = self.x2p(X, P)
        return P, X


class Segmenter(nn.Module):
    def __init__(self, d=32, d_p=32, grid=(8, 8), patch=4, heads=2, depth=2, mlp=64, c_up=8):
        super().__init__()
        steps = int(round(math.log2(patch)))
        if 2 ** steps != patch:
            raise ValidationError(f"patch {patch} must be a power of two")
        self.config = dict(d=d, d_p=d_p, gh=grid[0], gw=grid[1], patch=patch, heads=heads,
                           depth=depth, mlp=mlp, c_up=c_up)
        self.d, self.d_p, self.grid, self.patch = d, d_p, tuple(grid), patch
        self.pos = nn.Parameter(torch.randn(grid[0] * grid[1], d) * 0.1)
        self.prompt_in = nn.Linear(d_p, d)
        self.blocks = nn.ModuleList(TwoWayBlock(d, heads, mlp) for _ in range(depth))
        self.final = _Attn(d, heads)
        ups, ch = [], d
        for i in range(steps):
            out = c_up if i == steps - 1 else max(c_up, ch // 2)
            ups += [nn.ConvTranspose2d(ch, out, 2, stride=2), nn.GELU()]
            ch = out
        self.upscale = nn.Sequential(*ups[:-1])
        self.hyper = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, c_up))
        self.conf_head = nn.Sequential(nn.Linear(d, 16), nn.GELU(), nn.Linear(16, 1))
        self.frozen = False

    def forward(self, tokens: torch.Tensor, prompts: torch.Tensor):
        """tokens (B, N, d), prompts (B, m, d_p) -> logits (B, H, W), confidence (B,)."""
        B, N, d = tokens.shape
        if N != self.grid[0] * self.grid[1] or d != self.d:
            raise ValidationError(f"tokens {tuple(tokens.shape)} do not match grid {self.grid}, d={self.d}")
        if prompts.shape[-1] != self.d_p or prompts.shape[0] != B:
            raise ValidationError(f"prompts {tuple(prompts.shape)} do not match batch {B}, d_p={self.d_p}")
        X = tokens + self.pos
        P = self.prompt_in(prompts)
        for blk in self.blocks:
            P, X = blk(P, X)
        P = self.final(P, X)
        pooled = P.mean(dim=1)
        grid = X.transpose(1, 2).reshape(B, d, *self.grid)
        up = self.upscale(grid)  # B, c_up, H, W
        logits = torch.einsum("bc,bchw->bhw", self.hyper(pooled), up)
        confidence = torch.sigmoid(self.conf_head(pooled)).squeeze(-1)
        return logits, confidence

    def freeze(self) -> "Segmenter":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def checksum(self) -> str:
        return module_checksum(self)

    def save(self, path) -> None:
        tensors = {k: v.detach().float().numpy() for k, v in self.state_dict().items()}
        tensors["__config__"] = np.array([self.config[k] for k in sorted(self.config)], dtype=np.float32)
        binio.write_named_tensors(path, CASM_MAGIC, tensors)

    @classmethod
    def load(cls, path) -> "Segmenter":
        tensors = binio.read_named_tensors(path, CASM_MAGIC)
        keys = sorted(["d", "d_p", "gh", "gw", "patch", "heads", "depth", "mlp", "c_up"])
        cfg = {k: int(v) for k, v in zip(keys, tensors.pop("__config__"))}
        grid = (cfg.pop("gh"), cfg.pop("gw"))
        model = cls(grid=grid, **cfg)
        model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        return model.freeze()


def segment(features: VisualTokens, prompts, params: Segmenter) -> MaskPrediction:
    if not params.frozen:
        raise StateError("segmenter must be frozen before it is used for continual learning")
    P = torch.as_tensor(prompts, dtype=features.tokens.dtype)
    if P.ndim == 2:
        P = P.unsqueeze(0)
    tokens = features.tokens[:1] if features.tokens.ndim == 3 else features.tokens.unsqueeze(0)
    with torch.no_grad():
        logits, conf = params(tokens, P)
    logits = logits[0].double().numpy()
    return MaskPrediction(mask=1.0 / (1.0 + np.exp(-logits)), confidence=float(conf[0]), logits=logits)


def aggregate_masks(preds: Sequence[tuple[int, MaskPrediction]], binarize_threshold: float = BINARIZE_THRESHOLD,
                    shape: tuple | None = None) -> np.ndarray:
    """Label map from per-class masks; overlaps go to the most confident class, ties to the smaller id."""
    if not preds:
        if shape is None:
            raise ValidationError("shape is required to aggregate an empty prediction list")
        return np.zeros(shape, dtype=np.int64)
    masks = np.stack([np.asarray(p.mask, dtype=np.float64) for _, p in preds])
    conf = np.array([p.confidence for _, p in preds], dtype=np.float64)
    ids = np.array([c for c, _ in preds], dtype=np.int64)
    return kernels.aggregate_labels(masks, conf, ids, float(binarize_threshold))


# --- pretraining -------------------------------------------------------------------------

def patch_fractions(mask: np.ndarray, patch: int) -> np.ndarray:
    H, W = mask.shape
    m = mask.reshape(H // patch, patch, W // patch, patch).mean(axis=(1, 3))
    return m.reshape(-1)


def centroid_prompt_indices(mask: np.ndarray, patch: int, m: int) -> np.ndarray:
    """Object patches ordered by distance to the mask centroid, first m (cycled if fewer)."""
    frac = patch_fractions(mask, patch)
    gw = mask.shape[1] // patch
    obj = np.flatnonzero(frac >= 0.5)
    if obj.size == 0:
        obj = np.array([int(np.argmax(frac))])
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean() / patch - 0.5, xs.mean() / patch - 0.5
    dist = (obj // gw - cy) ** 2 + (obj % gw - cx) ** 2
    ordered = obj[np.argsort(dist, kind="stable")]
    return np.resize(ordered, m)


def sample_prompt_indices(mask: np.ndarray, patch: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Training-time prompts: centroid patch first, then random object (rarely background) patches."""
    frac = patch_fractions(mask, patch)
    obj = np.flatnonzero(frac >= 0.5)
    if obj.size == 0:
        obj = np.array([int(np.argmax(frac))])
    bg = np.flatnonzero(frac == 0)
    idx = np.empty(m, dtype=np.int64)
    idx[0] = centroid_prompt_indices(mask, patch, 1)[0]
    idx[1:] = rng.choice(obj, size=m - 1, replace=True)
    if bg.size and rng.random() < 0.2:
        idx[rng.integers(1, m)] = rng.choice(bg)
    return idx


def mask_iou(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = pred.astype(bool), target.astype(bool)
    union = (pred | target).sum()
    return 1.0 if union == 0 else float((pred & target).sum() / union)


@dataclass
class PretrainConfig:
    m: int = 6
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    holdout_fraction: float = 0.2
    prompt_noise: float = 0.05
    seed: int = 11


def pretrain_segmenter(pairs: Sequence[tuple[np.ndarray, np.ndarray]], grounder: Grounder,
                       config: PretrainConfig = PretrainConfig(), log=None):
    """Train the decoder on (image, binary mask) pairs with centroid-derived prompts, then freeze.

    Prompts are frozen image tokens taken at object patches, so any
    upstream module that emits object-like tokens can drive the decoder.
    Returns (segmenter, report) where report holds the held-out mean IoU.
    """
    if len(pairs) < 100:
        raise ValidationError(f"segmenter pretraining needs >= 100 pairs, got {len(pairs)}")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    enc = grounder.encoder
    patch = enc.patch
    n_hold = max(1, int(round(len(pairs) * config.holdout_fraction)))
    order = rng.permutation(len(pairs))
    hold, train = order[:n_hold], order[n_hold:]

    images = np.stack([p[0] for p in pairs]).astype(np.float32)
    masks = np.stack([p[1] for p in pairs]).astype(np.float32)
    with torch.no_grad():
        feats = torch.cat([encode_image(grounder, images[i:i + 256]).tokens for i in range(0, len(images), 256)])
    tok_std = float(feats.std())

    seg = Segmenter(d=enc.d, d_p=enc.d, grid=enc.grid, patch=patch)
    opt = torch.optim.AdamW(seg.parameters(), lr=config.lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: (1 - s / config.steps) ** 0.9)
    mask_t = torch.from_numpy(masks)
    for step in range(config.steps):
        batch = rng.choice(train, size=config.batch_size, replace=len(train) < config.batch_size)
        idx = np.stack([sample_prompt_indices(masks[i] > 0.5, patch, config.m, rng) for i in batch])
        b = torch.from_numpy(batch)
        prompts = feats[b.unsqueeze(1), torch.from_numpy(idx)]
        noise = torch.from_numpy(rng.standard_normal(prompts.shape).astype(np.float32))
        prompts = prompts + config.prompt_noise * tok_std * noise
        logits, conf = seg(feats[b], prompts)
        target = mask_t[b]
        with torch.no_grad():
            pred = logits > 0
            inter = (pred & (target > 0.5)).sum(dim=(1, 2)).float()
            union = (pred | (target > 0.5)).sum(dim=(1, 2)).float().clamp_min(1)
            iou = inter / union
        loss = seg_loss_from_logits(logits, target) + F.mse_loss(conf, iou)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log and step % 250 == 0:
            log(f"segmenter step {step} loss {loss.item():.4f}")
    seg.freeze()
    ious = []
    with torch.no_grad():
        for i in hold:
            idx = torch.from_numpy(centroid_prompt_indices(masks[i] > 0.5, patch, config.m))
            logits, _ = seg(feats[i:i + 1], feats[i:i + 1, idx])
            ious.append(mask_iou(logits[0].numpy() > 0, masks[i] > 0.5))
    return seg, {"holdout_iou": float(np.mean(ious)), "holdout_pairs": int(n_hold)}
