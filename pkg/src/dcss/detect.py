"""Token/class affinity, thresholding, salient-token selection and class readout.

Single-image functions take ``N x c`` (or ``N x d``) tensors.  The ``*_batch``
variants operate on ``B x N x c`` tensors and stay differentiable with
respect to the retained affinity values and token embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from .errors import DegenerateInputError, ValidationError

DEFAULT_TAU = 0.3


def affinity(V: torch.Tensor, E: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between every token row of V and class row of E."""
    if V.shape[-1] != E.shape[-1]:
        raise ValidationError(f"embedding dims differ: {V.shape[-1]} vs {E.shape[-1]}")
    vn = V.norm(dim=-1)
    en = E.norm(dim=-1)
    for name, norms in (("V", vn), ("E", en)):
        zero = (norms == 0).nonzero()
        if len(zero):
            raise DegenerateInputError(f"zero-norm row in {name} at index {tuple(zero[0].tolist())}")
    S = (V / vn.unsqueeze(-1)) @ (E / en.unsqueeze(-1)).transpose(-1, -2)
    return S.clamp(-1.0, 1.0)


def sparsify(S: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"tau must lie in (0, 1), got {tau}")
    return torch.where(S >= tau, S, torch.zeros_like(S))


@dataclass
class TokenSelection:
    rows: list  # ascending token indices with any nonzero affinity
    assoc: list  # (token index, class index), one per selected row
    V_sel: torch.Tensor  # len(rows) x d

    def class_of(self) -> dict[int, int]:
        return dict(self.assoc)


def select_tokens(S_sparse: torch.Tensor, V: torch.Tensor) -> TokenSelection:
    if S_sparse.shape[0] != V.shape[0]:
        raise ValidationError(f"{S_sparse.shape[0]} affinity rows for {V.shape[0]} tokens")
    sel, cls = kernels.select_rows(S_sparse.detach().cpu().numpy().astype(np.float64))
    rows = [int(n) for n in np.flatnonzero(sel)]
    assoc = [(n, int(cls[n])) for n in rows]
    return TokenSelection(rows, assoc, V[rows])


def class_scores(S_sparse: torch.Tensor) -> torch.Tensor:
    """Mean of the strictly positive entries per column; 0 for empty columns."""
    pos = S_sparse > 0
    count = pos.sum(dim=-2)
    total = torch.where(pos, S_sparse, torch.zeros_like(S_sparse)).sum(dim=-2)
    return torch.where(count > 0, total / count.clamp_min(1), torch.zeros_like(total))


def detected_classes(sel: TokenSelection, c_t: int | None = None) -> set[int]:
    return {k for _, k in sel.assoc if c_t is None or k < c_t}


def assignment_batch(S_sparse: torch.Tensor) -> torch.Tensor:
    """Boolean B x N x c map: token n selected and associated with class k.

    ``argmax`` returns the first maximal index, which is the smallest-class tie rule.
    """
    selected = (S_sparse > 0).any(dim=-1, keepdim=True)
    best = S_sparse.argmax(dim=-1, keepdim=True)
    onehot = torch.zeros_like(S_sparse, dtype=torch.bool).scatter_(-1, best, True)
    return onehot & selected
