"""Low-rank adapters on frozen linear maps and the task-keyed adapter registry."""
from __future__ import annotations

import hashlib
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from . import binio
from .errors import UnknownTaskError, ValidationError

LORA_MAGIC = b"LORA"


@dataclass
class AdapterParams:
    A: torch.Tensor  # r x d_in
    B: torch.Tensor  # d_out x r
    rank: int
    scaling: float

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.B @ self.A)

    def parameters(self) -> list[torch.Tensor]:
        return [self.A, self.B]

    def requires_grad_(self, flag: bool = True) -> "AdapterParams":
        self.A.requires_grad_(flag)
        self.B.requires_grad_(flag)
        return self


def init_adapter(d_in: int, d_out: int, r: int, scaling: float | None = None, seed: int = 0,
                 dtype=torch.float32) -> AdapterParams:
    if min(d_in, d_out, r) < 1:
        raise ValidationError(f"dims and rank must be >= 1 (d_in={d_in}, d_out={d_out}, r={r})")
    if r > min(d_in, d_out):
        raise ValidationError(f"rank {r} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
    gen = torch.Generator().manual_seed(int(seed))
    A = (torch.randn(r, d_in, generator=gen, dtype=torch.float64) * 0.02).to(dtype)
    B = torch.zeros(d_out, r, dtype=dtype)
    # float32-representable so checkpoints round-trip bitwise
    scaling = float(np.float32(1.0 / r if scaling is None else scaling))
    return AdapterParams(A, B, r, scaling)


def adapted_linear(W: torch.Tensor, bias: torch.Tensor | None, adapter: AdapterParams | None,
                   x: torch.Tensor) -> torch.Tensor:
    """``(W + s B A) x + bias``, computed as the frozen path plus a low-rank delta."""
    if x.shape[-1] != W.shape[1]:
        raise ValidationError(f"input dim {x.shape[-1]} does not match weight {tuple(W.shape)}")
    if bias is not None and bias.shape[0] != W.shape[0]:
        raise ValidationError(f"bias dim {bias.shape[0]} does not match weight {tuple(W.shape)}")
    out = F.linear(x, W, bias)
    if adapter is None:
        return out
    if adapter.d_in != W.shape[1] or adapter.d_out != W.shape[0]:
        raise ValidationError(
            f"adapter {adapter.d_out}x{adapter.d_in} does not match weight {tuple(W.shape)}")
    return out + adapter.scaling * F.linear(F.linear(x, adapter.A), adapter.B)


def tensor_checksum(tensors: Iterable[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    state = module.state_dict()
    return tensor_checksum(state[k] for k in sorted(state))


class AdapterView(Mapping):
    """Read-only (layer_id, projection_id) -> AdapterParams map for one task."""

    def __init__(self, task: int, adapters: dict):
        self.task = task
        self._adapters = adapters

    def __getitem__(self, key):
        return self._adapters[key]

    def get(self, key, default=None):
        return self._adapters.get(key, default)

    def __iter__(self):
        return iter(self._adapters)

    def __len__(self):
        return len(self._adapters)


class AdapterRegistry:
    def __init__(self):
        self._adapters: dict[tuple, AdapterParams] = {}
        self.active_task: int | None = None

    def tasks(self) -> list[int]:
        return sorted({k[0] for k in self._adapters})

    def has_task(self, task: int) -> bool:
        return any(k[0] == task for k in self._adapters)

    def _require(self, task: int) -> None:
        if not self.has_task(task):
            raise UnknownTaskError(f"no adapters registered for task {task}")

    def add_task(self, task: int, sites: Iterable[tuple], r: int, scaling: float | None = None,
                 seed: int = 0, dtype=torch.float32) -> AdapterView:
        """Create fresh adapters; ``sites`` yields (layer_id, projection_id, d_in, d_out)."""
        if self.has_task(task):
            raise ValidationError(f"task {task} already has adapters")
        for i, (layer, proj, d_in, d_out) in enumerate(sites):
            key = (task, layer, proj)
            if key in self._adapters:
                raise ValidationError(f"duplicate adapter site {key}")
            self._adapters[key] = init_adapter(d_in, d_out, r, scaling, seed=seed * 1000 + i, dtype=dtype)
        return self.view(task)

    def view(self, task: int) -> AdapterView:
        self._require(task)
        return AdapterView(task, {(k[1], k[2]): v for k, v in self._adapters.items() if k[0] == task})

    def attach(self, task: int) -> AdapterView:
        view = self.view(task)
        self.active_task = task
        return view

    def detach(self) -> None:
        self.active_task = None

    def parameters(self, task: int) -> list[torch.Tensor]:
        return [p for key in sorted(self.view(task)) for p in self.view(task)[key].parameters()]

    def checksum(self, task: int) -> str:
        return tensor_checksum(self.parameters(task))

    def size_bytes(self, task: int) -> int:
        return sum(p.numel() * 4 for p in self.parameters(task))

    def save(self, task: int, path) -> None:
        view = self.view(task)
        with open(path, "wb") as f:
            binio.write_magic(f, LORA_MAGIC)
            binio.write_u32(f, len(view))
            for layer, proj in sorted(view):
                ad = view[(layer, proj)]
                binio.write_str(f, layer)
                binio.write_str(f, proj)
                binio.write_u32(f, ad.rank)
                binio.write_f32(f, ad.scaling)
                binio.write_tensor(f, ad.A.detach().numpy())
                binio.write_tensor(f, ad.B.detach().numpy())

    def load(self, path, task: int) -> AdapterView:
        records = {}
        with open(path, "rb") as f:
            binio.read_magic(f, LORA_MAGIC)
            for _ in range(binio.read_u32(f)):
                layer, proj = binio.read_str(f), binio.read_str(f)
                r = binio.read_u32(f)
                scaling = binio.read_f32(f)
                A = torch.from_numpy(binio.read_tensor(f))
                B = torch.from_numpy(binio.read_tensor(f))
                records[(task, layer, proj)] = AdapterParams(A, B, r, float(np.float32(scaling)))
        for key in [k for k in self._adapters if k[0] == task]:
            del self._adapters[key]
        self._adapters.update(records)
        return self.view(task)
