"""Channel selection into per-class token sets and per-class prompt generators."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import binio
from .detect import TokenSelection
from .errors import ValidationError

PGEN_MAGIC = b"PGEN"


@dataclass
class ClassTokenSet:
    class_id: int
    token_indices: list
    tokens: torch.Tensor  # |T_k| x d, ascending token index

    def __len__(self):
        return len(self.token_indices)


def channel_select(sel: TokenSelection, c_t: int) -> list[ClassTokenSet]:
    d = sel.V_sel.shape[-1]
    out = []
    for k in range(c_t):
        pos = [i for i, (_, j) in enumerate(sel.assoc) if j == k]
        idx = [sel.assoc[i][0] for i in pos]
        tokens = sel.V_sel[pos] if pos else sel.V_sel.new_zeros((0, d))
        out.append(ClassTokenSet(k, idx, tokens))
    return out


def flatten_fixed(tokens: torch.Tensor, Q_m: int) -> torch.Tensor:
    flat = tokens.reshape(-1)
    if flat.numel() >= Q_m:
        return flat[:Q_m]
    return F.pad(flat, (0, Q_m - flat.numel()))


def pgen_input(tokens: torch.Tensor, L_k: torch.Tensor, Q_m: int) -> torch.Tensor:
    """Flatten in row order, zero-pad or truncate to Q_m, then add the class embedding."""
    if Q_m < 1:
        raise ValidationError(f"Q_m must be >= 1, got {Q_m}")
    if L_k.shape != (Q_m,):
        raise ValidationError(f"L_k has shape {tuple(L_k.shape)}, expected ({Q_m},)")
    return flatten_fixed(tokens, Q_m) + L_k


def flatten_batch(V: torch.Tensor, assign: torch.Tensor, Q_m: int) -> torch.Tensor:
    """Batched Flatten: V (B, N, d), assign (B, N, c) bool -> (B, c, Q_m).

    Tokens of each (image, class) fill consecutive slots in ascending token
    order; slots beyond ceil(Q_m / d) are dropped before truncation.
    """
    B, N, d = V.shape
    c = assign.shape[-1]
    nslots = math.ceil(Q_m / d)
    slot = assign.long().cumsum(dim=1) - 1
    keep = assign & (slot < nslots)
    b, n, k = keep.nonzero(as_tuple=True)
    Z = V.new_zeros((B, c, nslots, d))
    Z = Z.index_put((b, k, slot[b, n, k]), V[b, n])
    flat = Z.reshape(B, c, nslots * d)
    return flat[..., :Q_m]


class PGen(nn.Module):
    """Class-specific prompt generator: Q_m -> hidden (ReLU) -> m x d_p."""

    def __init__(self, class_id: int, Q_m=256, h=128, m=6, d_p=32, seed: int = 0):
        super().__init__()
        self.class_id = int(class_id)
        self.Q_m, self.h, self.m, self.d_p = Q_m, h, m, d_p
        self.L = nn.Parameter(torch.zeros(Q_m))
        self.fc1 = nn.Linear(Q_m, h)
        self.fc2 = nn.Linear(h, m * d_p)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for lin in (self.fc1, self.fc2):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.copy_(torch.rand(lin.weight.shape, generator=gen) * 2 * bound - bound)
                lin.bias.zero_()

    def forward(self, z_hat: torch.Tensor) -> torch.Tensor:
        if z_hat.shape[-1] != self.Q_m:
            raise ValidationError(f"pGen input length {z_hat.shape[-1]} != Q_m {self.Q_m}")
        out = self.fc2(F.relu(self.fc1(z_hat)))
        return out.reshape(*z_hat.shape[:-1], self.m, self.d_p)

    def prompts(self, flat: torch.Tensor) -> torch.Tensor:
        return self(flat + self.L)


def pgen_forward(z_hat: torch.Tensor, params: PGen, class_id: int | None = None) -> torch.Tensor:
    if class_id is not None and class_id != params.class_id:
        raise ValidationError(f"pGen for class {params.class_id} used for class {class_id}")
    return params(z_hat)


def save_pgens(path, pgens: dict[int, PGen]) -> None:
    with open(path, "wb") as f:
        binio.write_magic(f, PGEN_MAGIC)
        binio.write_u32(f, len(pgens))
        for cid in sorted(pgens):
            g = pgens[cid]
            for v in (cid, g.Q_m, g.h, g.m, g.d_p):
                binio.write_u32(f, v)
            for t in (g.L, g.fc1.weight, g.fc1.bias, g.fc2.weight, g.fc2.bias):
                binio.write_tensor(f, t.detach().numpy())


def load_pgens(path) -> dict[int, PGen]:
    out = {}
    with open(path, "rb") as f:
        binio.read_magic(f, PGEN_MAGIC)
        for _ in range(binio.read_u32(f)):
            cid, Q_m, h, m, d_p = (binio.read_u32(f) for _ in range(5))
            g = PGen(cid, Q_m, h, m, d_p)
            with torch.no_grad():
                for t in (g.L, g.fc1.weight, g.fc1.bias, g.fc2.weight, g.fc2.bias):
                    t.copy_(torch.from_numpy(binio.read_tensor(f)))
            out[cid] = g
    return out
