"""Class-agnostic pretext training of the encoder + fusion block before it is frozen.

Three heads share the encoder: per-pixel foreground bits of each patch, mean
patch colour, and a grounding objective that pulls foreground tokens toward
whatever text rows are present (random unit vectors) and pushes background
tokens away.  Class identity never enters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Grounder
from .detect import affinity
from .synth_data import SegSample
from .text_bank import aggregate_batch


@dataclass
class PretextConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    max_text_rows: int = 4
    bank_rows: int = 4
    fg_target: float = 0.45
    seed: int = 5


def _patch_targets(samples: list[SegSample], patch: int):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    fg = np.stack([s.label > 0 for s in samples]).astype(np.float32)
    B, H, W, C = images.shape
    gh, gw = H // patch, W // patch
    bits = fg.reshape(B, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4).reshape(B, gh * gw, patch * patch)
    colour = images.reshape(B, gh, patch, gw, patch, C).mean(axis=(2, 4)).reshape(B, gh * gw, C)
    return images, bits, colour


def pretrain_grounder(samples: list[SegSample], grounder: Grounder | None = None,
                      config: PretextConfig = PretextConfig(), log=None) -> Grounder:
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if grounder is None:
        H, W, C = samples[0].image.shape
        grounder = Grounder(H=H, W=W, C=C)
    enc = grounder.encoder
    d, patch = enc.d, enc.patch
    images, bits, colour = (torch.from_numpy(a) for a in _patch_targets(samples, patch))
    frac = bits.mean(dim=-1)
    bits_head = nn.Linear(d, patch * patch)
    colour_head = nn.Linear(d, colour.shape[-1])
    params = list(grounder.parameters()) + list(bits_head.parameters()) + list(colour_head.parameters())
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: (1 - s / config.steps) ** 0.9)
    grounder.train()
    for step in range(config.steps):
        b = torch.from_numpy(rng.choice(len(samples), size=config.batch_size, replace=False))
        vt = enc(images[b])
        loss_bits = F.binary_cross_entropy_with_logits(bits_head(vt.tokens), bits[b])
        loss_col = F.mse_loss(colour_head(vt.tokens), colour[b])

        c = int(rng.integers(1, config.max_text_rows + 1))
        anchors = rng.standard_normal((c, 1, d))
        banks = anchors + 0.3 * rng.standard_normal((c, config.bank_rows, d)) / np.sqrt(d)
        banks /= np.linalg.norm(banks, axis=-1, keepdims=True)
        E = aggregate_batch(torch.from_numpy(banks.astype(np.float32)), vt.cls)
        fused = grounder.fusion(vt.tokens, E)
        S = affinity(fused.V, fused.E)
        f = frac[b].unsqueeze(-1)
        fg, bg = (f >= 0.5).float(), (f == 0).float()
        loss_fg = (fg * F.relu(config.fg_target - S) ** 2).sum() / fg.sum().clamp_min(1) / c
        loss_bg = (bg * F.relu(S) ** 2).sum() / bg.sum().clamp_min(1) / c
        loss = loss_bits + loss_col + 4.0 * (loss_fg + loss_bg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log and step % 250 == 0:
            log(f"pretext step {step} bits {loss_bits.item():.4f} colour {loss_col.item():.4f} "
                f"fg {loss_fg.item():.4f} bg {loss_bg.item():.4f}")
    return grounder.freeze()
