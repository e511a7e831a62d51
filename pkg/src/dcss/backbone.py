"""Frozen toy image encoder and text-image fusion block, both with adapter injection sites.

The encoder is a patch embedding followed by pre-norm self-attention layers;
its cls token is a learned query pooled over the final tokens.  The fusion
block runs image->text and text->image attention from the same inputs and
adds both results residually.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import binio
from .errors import ValidationError
from .lora import AdapterView, adapted_linear, module_checksum

FRZB_MAGIC = b"FRZB"


@dataclass
class VisualTokens:
    tokens: torch.Tensor  # B x N x d
    cls: torch.Tensor  # B x d
    grid: tuple = (8, 8)


@dataclass
class FusedEmbeddings:
    V: torch.Tensor  # B x N x d
    E: torch.Tensor  # B x c_t x d


def _get(adapters, layer, proj):
    return None if adapters is None else adapters.get((layer, proj))


class AdaptedAttention(nn.Module):
    """Multi-head attention whose projections route through ``adapted_linear``."""

    def __init__(self, d: int, heads: int, layer_id: str):
        super().__init__()
        if d % heads:
            raise ValidationError(f"d={d} not divisible by heads={heads}")
        self.d, self.heads, self.layer_id = d, heads, layer_id
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def _proj(self, name, x, adapters):
        lin = getattr(self, name)
        return adapted_linear(lin.weight, lin.bias, _get(adapters, self.layer_id, name), x)

    def forward(self, xq, xkv, adapters: AdapterView | None = None):
        B, Nq, d = xq.shape
        Nk = xkv.shape[1]
        h = self.heads
        q = self._proj("q", xq, adapters).view(B, Nq, h, d // h).transpose(1, 2)
        k = self._proj("k", xkv, adapters).view(B, Nk, h, d // h).transpose(1, 2)
        v = self._proj("v", xkv, adapters).view(B, Nk, h, d // h).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, Nq, d)
        return self._proj("o", out, adapters)


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, mlp, layer_id):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = AdaptedAttention(d, heads, layer_id)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mlp)
        self.fc2 = nn.Linear(mlp, d)

    def forward(self, x, adapters=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, adapters)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ImageEncoder(nn.Module):
    def __init__(self, H=32, W=32, C=3, patch=4, d=32, heads=2, layers=2, mlp=64):
        super().__init__()
        if H % patch or W % patch:
            raise ValidationError(f"image {H}x{W} not divisible by patch {patch}")
        self.H, self.W, self.C, self.patch, self.d = H, W, C, patch, d
        self.grid = (H // patch, W // patch)
        n = self.grid[0] * self.grid[1]
        self.patch_embed = nn.Linear(C * patch * patch, d)
        self.pos = nn.Parameter(torch.randn(n, d) * 0.1)
        self.layers = nn.ModuleList(EncoderLayer(d, heads, mlp, f"enc{i}") for i in range(layers))
        self.ln = nn.LayerNorm(d)
        self.cls_query = nn.Parameter(torch.randn(d) * 0.1)

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        B, H, W, C = images.shape
        if (H, W, C) != (self.H, self.W, self.C):
            raise ValidationError(f"image dims {(H, W, C)} do not match encoder {(self.H, self.W, self.C)}")
        p = self.patch
        x = images.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def forward(self, images: torch.Tensor, adapters: AdapterView | None = None) -> VisualTokens:
        x = self.patch_embed(self.patchify(images)) + self.pos
        for layer in self.layers:
            x = layer(x, adapters)
        x = self.ln(x)
        att = torch.softmax(x @ self.cls_query / math.sqrt(self.d), dim=-1)
        cls = torch.einsum("bn,bnd->bd", att, x)
        return VisualTokens(x, cls, self.grid)


class CrossAttentionFusion(nn.Module):
    """One bidirectional text-image attention layer; no text positional encoding."""

    def __init__(self, d=32, heads=2):
        super().__init__()
        self.d = d
        self.ln_v = nn.LayerNorm(d)
        self.ln_e = nn.LayerNorm(d)
        self.i2t = AdaptedAttention(d, heads, "fuse.i2t")  # image queries, text keys/values
        self.t2i = AdaptedAttention(d, heads, "fuse.t2i")  # text queries, image keys/values

    def forward(self, V: torch.Tensor, E: torch.Tensor, adapters: AdapterView | None = None) -> FusedEmbeddings:
        if V.shape[-1] != self.d or E.shape[-1] != self.d:
            raise ValidationError(f"fusion expects d={self.d}, got V {tuple(V.shape)}, E {tuple(E.shape)}")
        if E.shape[-2] < 1:
            raise ValidationError("at least one class embedding is required")
        v, e = self.ln_v(V), self.ln_e(E)
        return FusedEmbeddings(V + self.i2t(v, e, adapters), E + self.t2i(e, v, adapters))


def adapter_sites(encoder: ImageEncoder, fusion: CrossAttentionFusion) -> list[tuple]:
    """(layer_id, projection_id, d_in, d_out) for every adapted projection.

    Encoder self-attention carries adapters on queries and values, the fusion
    layer on keys and values of both directions.
    """
    d = encoder.d
    sites = [(f"enc{i}", p, d, d) for i in range(len(encoder.layers)) for p in ("q", "v")]
    sites += [(layer, p, d, d) for layer in ("fuse.i2t", "fuse.t2i") for p in ("k", "v")]
    return sites


class Grounder(nn.Module):
    """Encoder plus fusion, frozen as one fixture."""

    def __init__(self, H=32, W=32, C=3, patch=4, d=32, heads=2, layers=2, mlp=64):
        super().__init__()
        self.config = dict(H=H, W=W, C=C, patch=patch, d=d, heads=heads, layers=layers, mlp=mlp)
        self.encoder = ImageEncoder(H, W, C, patch, d, heads, layers, mlp)
        self.fusion = CrossAttentionFusion(d, heads)

    def sites(self):
        return adapter_sites(self.encoder, self.fusion)

    def freeze(self) -> "Grounder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def checksums(self) -> dict[str, str]:
        return {"backbone": module_checksum(self.encoder), "fusion": module_checksum(self.fusion)}

    def save(self, path) -> None:
        tensors = {k: v.detach().float().numpy() for k, v in self.state_dict().items()}
        tensors["__config__"] = np.array([self.config[k] for k in sorted(self.config)], dtype=np.float32)
        binio.write_named_tensors(path, FRZB_MAGIC, tensors)

    @classmethod
    def load(cls, path) -> "Grounder":
        tensors = binio.read_named_tensors(path, FRZB_MAGIC)
        keys = sorted(["H", "W", "C", "patch", "d", "heads", "layers", "mlp"])
        config = {k: int(v) for k, v in zip(keys, tensors.pop("__config__"))}
        model = cls(**config)
        model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        return model.freeze()


def encode_image(grounder: Grounder, images, adapters: AdapterView | None = None) -> VisualTokens:
    """Accepts one H x W x C image or a batch; returns batched tokens."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    x = x.to(next(grounder.parameters()).dtype)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return grounder.encoder(x, adapters)


def cross_attend(grounder: Grounder, V: torch.Tensor, E: torch.Tensor,
                 adapters: AdapterView | None = None) -> FusedEmbeddings:
    return grounder.fusion(V, E, adapters)
