"""Continual training over a task schedule and task-ID-free inference.

Per task ``t`` only two kinds of parameters are created and trained: the
task's adapters (encoder Q/V, fusion K/V) and one prompt generator per new
class.  Everything else is loaded frozen and checked by checksum.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Grounder
from .cas import MaskPrediction, Segmenter, aggregate_masks
from .config import ExperimentConfig
from .detect import affinity, assignment_batch, class_scores, sparsify
from .errors import StateError, ValidationError
from .lora import AdapterRegistry, AdapterView, tensor_checksum
from .losses import ASLConfig, asymmetric_loss, seg_loss_from_logits
from .pretrained import load_grounder, load_segmenter
from .spg import PGen, flatten_batch, load_pgens, save_pgens
from .synth_data import SegSample, TaskSpec
from .text_bank import (PhraseEmbeddingBank, StubTextEncoder, aggregate_batch, build_bank,
                        load_banks, save_banks)

log = logging.getLogger(__name__)


@dataclass
class TaskOutputs:
    """Per-task forward results for a batch; classes follow ``task.class_ids`` order."""
    scores: torch.Tensor  # B x c
    assign: torch.Tensor  # B x N x c
    prompts: torch.Tensor  # B x c x m x d_p
    S_sparse: torch.Tensor  # B x N x c


@dataclass
class ModelState:
    config: ExperimentConfig
    grounder: Grounder
    segmenter: Segmenter
    class_names: dict
    registry: AdapterRegistry = field(default_factory=AdapterRegistry)
    pgens: dict = field(default_factory=dict)
    banks: dict = field(default_factory=dict)
    learned_tasks: list = field(default_factory=list)
    frozen_reference: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.segmenter.frozen:
            raise StateError("segmenter must be frozen before continual learning starts")
        if not self.frozen_reference:
            self.frozen_reference = self.frozen_checksums()
        self._bank_cache = {}

    def frozen_checksums(self) -> dict:
        return {**self.grounder.checksums(), "segmenter": self.segmenter.checksum()}

    def assert_frozen(self) -> None:
        now = self.frozen_checksums()
        changed = [k for k in now if now[k] != self.frozen_reference.get(k)]
        if changed:
            raise StateError(f"frozen components changed: {changed}")

    def task(self, t: int) -> TaskSpec:
        for task in self.learned_tasks:
            if task.task_index == t:
                return task
        raise StateError(f"task {t} has not been learned")

    def bank_tensor(self, class_ids) -> torch.Tensor:
        key = tuple(class_ids)
        if key not in self._bank_cache:
            g = np.stack([self.banks[c].embeddings for c in class_ids]).astype(np.float32)
            self._bank_cache[key] = torch.from_numpy(g)
        return self._bank_cache[key]

    def task_checksum(self, t: int) -> str:
        """Adapters of task t plus the prompt generators of its classes."""
        task = self.task(t)
        tensors = self.registry.parameters(t)
        for c in task.class_ids:
            tensors += list(self.pgens[c].state_dict().values())
        return tensor_checksum(tensors)


def new_state(config: ExperimentConfig, class_names: dict, encoder=None) -> ModelState:
    grounder = load_grounder(config.backbone_path)
    segmenter = load_segmenter(config.segmenter_path)
    gcfg = grounder.config
    for key in ("H", "W", "C", "d", "patch", "heads"):
        if gcfg[key] != getattr(config, key):
            raise ValidationError(f"config {key}={getattr(config, key)} does not match backbone fixture ({gcfg[key]})")
    if segmenter.d_p != config.d_p:
        raise ValidationError(f"config d_p={config.d_p} does not match segmenter fixture ({segmenter.d_p})")
    encoder = encoder or StubTextEncoder(config.d, sorted(set(class_names.values()))[: config.d])
    banks = {c: build_bank(c, name, config.M, encoder) for c, name in class_names.items()}
    return ModelState(config, grounder, segmenter, dict(class_names), banks=banks)


def _images(samples) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))


def frozen_tokens(state: ModelState, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return state.grounder.encoder(images).tokens


def task_forward(state: ModelState, images: torch.Tensor, task: TaskSpec, view: AdapterView) -> TaskOutputs:
    cfg = state.config
    g = state.grounder
    vt = g.encoder(images, view)
    E = aggregate_batch(state.bank_tensor(task.class_ids), vt.cls)
    fused = g.fusion(vt.tokens, E, view)
    S_sparse = sparsify(affinity(fused.V, fused.E), cfg.tau)
    assign = assignment_batch(S_sparse)
    flat = flatten_batch(fused.V, assign, cfg.Q_m)
    prompts = torch.stack([state.pgens[c].prompts(flat[:, k]) for k, c in enumerate(task.class_ids)], dim=1)
    return TaskOutputs(class_scores(S_sparse), assign, prompts, S_sparse)


def segment_pairs(state: ModelState, tokens: torch.Tensor, prompts: torch.Tensor, b_idx, k_idx):
    """Run the frozen decoder for selected (image, class) pairs."""
    return state.segmenter(tokens[b_idx], prompts[b_idx, k_idx])


def _poly(step, total, power):
    return max(0.0, 1.0 - step / total) ** power


def train_task(state: ModelState, task: TaskSpec, data: list[SegSample], log_every: int = 0) -> dict:
    """Learn one task in place; returns the loss history.

    ``data`` must already be relabeled to the task's classes.
    """
    cfg = state.config
    if any(t.task_index == task.task_index for t in state.learned_tasks):
        raise StateError(f"task {task.task_index} has already been learned")
    expected = len(state.learned_tasks) + 1
    if task.task_index != expected:
        raise StateError(f"task {task.task_index} cannot follow {len(state.learned_tasks)} learned tasks")
    if not data:
        raise ValidationError(f"no training data for task {task.task_index}")
    allowed = set(task.class_ids) | {0}
    for s in data:
        if not set(np.unique(s.label).tolist()) <= allowed:
            raise ValidationError(f"sample {s.sample_id} is not relabeled for task {task.task_index}")
    state.assert_frozen()

    torch.manual_seed(cfg.seed * 7919 + task.task_index)
    rng = np.random.default_rng([cfg.seed, task.task_index])
    view = state.registry.add_task(task.task_index, state.grounder.sites(), cfg.rank, cfg.scaling,
                                   seed=cfg.seed * 100 + task.task_index)
    for c in task.class_ids:
        if c in state.pgens:
            raise StateError(f"class {c} already has a prompt generator")
        state.pgens[c] = PGen(c, cfg.Q_m, cfg.h, cfg.m, cfg.d_p, seed=cfg.seed * 1000 + c)
    state.registry.attach(task.task_index)
    params = state.registry.parameters(task.task_index)
    for p in params:
        p.requires_grad_(True)
    for c in task.class_ids:
        params += list(state.pgens[c].parameters())

    images = _images(data)
    labels = torch.from_numpy(np.stack([s.label.astype(np.int64) for s in data]))
    cls_ids = torch.tensor(task.class_ids)
    masks = labels.unsqueeze(1) == cls_ids.view(1, -1, 1, 1)  # n x c x H x W
    present = masks.flatten(2).any(-1)  # n x c
    tokens = frozen_tokens(state, images)

    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.wd)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: _poly(s, total, cfg.lr_power))
    asl_cfg = ASLConfig(cfg.gamma_pos, cfg.gamma_neg)
    history = {"loss": [], "seg": [], "asl": []}
    step = 0
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(len(data)))
        for i in range(0, len(data), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            out = task_forward(state, images[b], task, view)
            y = present[b].to(out.scores.dtype)
            loss_asl = asymmetric_loss(out.scores, y, asl_cfg)
            bi, ki = present[b].nonzero(as_tuple=True)
            logits, _ = segment_pairs(state, tokens[b], out.prompts, bi, ki)
            loss_seg = seg_loss_from_logits(logits, masks[b][bi, ki].to(logits.dtype))
            loss = loss_seg + cfg.asl_weight * loss_asl
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            history["loss"].append(loss.item())
            history["seg"].append(loss_seg.item())
            history["asl"].append(loss_asl.item())
            if log_every and step % log_every == 0:
                log.info("task %d step %d/%d loss %.4f (seg %.4f asl %.4f)", task.task_index, step, total,
                         loss.item(), loss_seg.item(), loss_asl.item())
            step += 1

    for p in params:
        p.requires_grad_(False)
        p.grad = None
    state.registry.detach()
    state.learned_tasks.append(task)
    state.assert_frozen()
    return history


# --- inference -----------------------------------------------------------------------------

def _task_predictions(state, images, tokens, task, detected_only=True):
    with torch.no_grad():
        out = task_forward(state, images, task, state.registry.view(task.task_index))
        detected = out.assign.any(dim=1)  # B x c
        if detected_only:
            bi, ki = detected.nonzero(as_tuple=True)
        else:
            B, c = detected.shape
            bi = torch.arange(B).repeat_interleave(c)
            ki = torch.arange(c).repeat(B)
        logits, conf = segment_pairs(state, tokens, out.prompts, bi, ki)
    preds = [[] for _ in range(images.shape[0])]
    for j, (b, k) in enumerate(zip(bi.tolist(), ki.tolist())):
        lg = logits[j].double().numpy()
        preds[b].append((task.class_ids[k], MaskPrediction(1.0 / (1.0 + np.exp(-lg)), float(conf[j]), lg),
                         bool(detected[b, k])))
    return preds


def predict_tasks(state: ModelState, images, tasks=None, parallel: bool | None = None):
    """Per-image list of (class_id, MaskPrediction) over the given tasks (default: all learned)."""
    if not state.learned_tasks:
        raise StateError("no learned tasks")
    tasks = state.learned_tasks if tasks is None else tasks
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if images.ndim == 3:
        images = images.unsqueeze(0)
    tokens = frozen_tokens(state, images)
    parallel = state.config.parallel_inference if parallel is None else parallel
    if parallel and len(tasks) > 1:
        with ThreadPoolExecutor(len(tasks)) as pool:
            per_task = list(pool.map(lambda t: _task_predictions(state, images, tokens, t), tasks))
    else:
        per_task = [_task_predictions(state, images, tokens, t) for t in tasks]
    out = []
    for b in range(images.shape[0]):
        preds = [(c, p) for task_preds in per_task for c, p, _ in task_preds[b]]
        # fixed fold order keeps parallel and sequential runs identical
        preds.sort(key=lambda cp: cp[0])
        out.append(preds)
    return out


def infer_batch(state: ModelState, images, tasks=None, parallel: bool | None = None) -> list[np.ndarray]:
    cfg = state.config
    return [aggregate_masks(preds, cfg.binarize_threshold, (cfg.H, cfg.W))
            for preds in predict_tasks(state, images, tasks, parallel)]


def infer(state: ModelState, image, parallel: bool | None = None) -> np.ndarray:
    return infer_batch(state, np.asarray(image)[None], parallel=parallel)[0]


def task_logits(state: ModelState, images, t: int) -> dict:
    """Mask logits and confidences for every class of task t (detected or not)."""
    task = state.task(t)
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    tokens = frozen_tokens(state, images)
    preds = _task_predictions(state, images, tokens, task, detected_only=False)
    return {
        "logits": np.stack([np.stack([p.logits for _, p, _ in row]) for row in preds]),
        "confidence": np.array([[p.confidence for _, p, _ in row] for row in preds]),
        "detected": np.array([[det for _, _, det in row] for row in preds]),
    }


# --- persistence ---------------------------------------------------------------------------

def save_state(state: ModelState, directory) -> Path:
    directory = Path(directory)
    (directory / "adapters").mkdir(parents=True, exist_ok=True)
    state.grounder.save(directory / "backbone.bin")
    state.segmenter.save(directory / "segmenter.bin")
    for t in state.registry.tasks():
        state.registry.save(t, directory / "adapters" / f"task_{t}.lora")
    save_pgens(directory / "pgens.bin", state.pgens)
    save_banks(directory / "banks", [state.banks[c] for c in sorted(state.banks)])
    meta = {
        "config": state.config.to_dict(),
        "class_names": {str(k): v for k, v in state.class_names.items()},
        "learned_tasks": [t.to_json() for t in state.learned_tasks],
        "frozen_checksums": state.frozen_reference,
    }
    (directory / "state.json").write_text(json.dumps(meta, indent=2))
    return directory


def load_state(directory) -> ModelState:
    directory = Path(directory)
    meta_path = directory / "state.json"
    if not meta_path.exists():
        raise StateError(f"no saved state in {directory}")
    meta = json.loads(meta_path.read_text())
    config = ExperimentConfig.from_dict(meta["config"])
    grounder = Grounder.load(directory / "backbone.bin")
    segmenter = Segmenter.load(directory / "segmenter.bin")
    banks: dict[int, PhraseEmbeddingBank] = load_banks(directory / "banks")
    state = ModelState(config, grounder, segmenter, {int(k): v for k, v in meta["class_names"].items()},
                       banks=banks, frozen_reference=meta["frozen_checksums"])
    state.assert_frozen()
    for t in meta["learned_tasks"]:
        task = TaskSpec(int(t["task_index"]), tuple(t["class_ids"]))
        state.registry.load(directory / "adapters" / f"task_{task.task_index}.lora", task.task_index)
        state.learned_tasks.append(task)
    state.pgens = load_pgens(directory / "pgens.bin")
    return state
