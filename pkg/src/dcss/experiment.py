"""Evaluation and end-to-end experiment orchestration with on-disk reports."""
from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import StateError, ValidationError
from .harness import ModelState, infer_batch, new_state, save_state, train_task
from .metrics import Metrics, confusion_over, forgetting, summarize
from .synth_data import DatasetSpec, SegSample, TaskSchedule, build_schedule, generate_dataset, task_data

log = logging.getLogger(__name__)

EVAL_BATCH = 64


def predict_dataset(state: ModelState, samples: list[SegSample], tasks=None) -> list[np.ndarray]:
    preds = []
    for i in range(0, len(samples), EVAL_BATCH):
        chunk = np.stack([s.image for s in samples[i:i + EVAL_BATCH]])
        preds.extend(infer_batch(state, chunk, tasks))
    return preds


def evaluate(state: ModelState, samples: list[SegSample], schedule: TaskSchedule, up_to_task: int,
             only_task: int | None = None, background: bool | None = None) -> Metrics:
    """Score predictions from tasks 1..up_to_task (or a single task) against full labels.

    Ground-truth pixels of classes not learned by ``up_to_task`` count as background.
    """
    learned_idx = [t.task_index for t in state.learned_tasks]
    if up_to_task < 1 or up_to_task > len(schedule) or any(t not in learned_idx for t in range(1, up_to_task + 1)):
        raise StateError(f"cannot evaluate up to task {up_to_task}; learned tasks are {learned_idx}")
    if only_task is not None:
        tasks = [state.task(only_task)]
    else:
        tasks = [state.task(t) for t in range(1, up_to_task + 1)]
    background = state.config.background_in_miou if background is None else background
    learned = schedule.classes_up_to(up_to_task)
    num_labels = max(c for task in schedule for c in task.class_ids) + 1
    preds = predict_dataset(state, samples, tasks)
    conf = confusion_over(samples, preds, learned, num_labels)
    return summarize(conf, schedule, up_to_task, background)


def make_data(config: ExperimentConfig):
    train_spec = DatasetSpec(num_classes=config.num_classes, H=config.H, W=config.W, C=config.C,
                             samples_per_class=config.samples_per_class, seed=config.data_seed)
    test_spec = DatasetSpec(num_classes=config.num_classes, H=config.H, W=config.W, C=config.C,
                            samples_per_class=config.test_samples_per_class, seed=config.test_seed)
    return train_spec, generate_dataset(train_spec), generate_dataset(test_spec)


def metrics_csv(report: dict) -> str:
    classes = sorted({int(c) for row in report["tasks"] for c in row["metrics"]["per_class_iou"]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "classes", "miou_old", "miou_new", "miou_all"] + [f"iou_{c}" for c in classes])
    fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
    for row in report["tasks"]:
        m = row["metrics"]
        w.writerow([row["task"], " ".join(map(str, row["classes"])), fmt(m["miou_old"]), fmt(m["miou_new"]),
                    fmt(m["miou_all"])] + [fmt(m["per_class_iou"].get(str(c))) for c in classes])
    return buf.getvalue()


def run_experiment(config, out_dir, save_checkpoints: bool = True, on_task_end=None) -> dict:
    """Train over the configured schedule, evaluate after every task and write reports.

    Writes ``metrics.json`` (deterministic for a fixed seed), ``metrics.csv``,
    ``train_log.json`` and ``checkpoints/task_<t>/``.  ``on_task_end(state, task, test)``
    is called after each task is learned, before it is evaluated.
    """
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_json(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = build_schedule(config.num_classes, config.schedule)
    spec, train, test = make_data(config)
    state = new_state(config, spec.class_names())
    report = {
        "config": config.to_dict(),
        "schedule": schedule.to_json(),
        "frozen_checksums": state.frozen_reference,
        "tasks": [],
    }
    train_log = {}
    history = []
    for task in schedule:
        data = task_data(train, task)
        if not data:
            raise ValidationError(f"task {task.task_index} has no training images")
        losses = train_task(state, task, data)
        train_log[str(task.task_index)] = losses
        state.assert_frozen()
        if on_task_end is not None:
            on_task_end(state, task, test)
        metrics = evaluate(state, test, schedule, task.task_index)
        history.append(metrics.per_class_iou)
        metrics.forgetting = forgetting(history)
        per_task = {str(s.task_index): evaluate(state, test, schedule, task.task_index, only_task=s.task_index)
                    .per_class_iou for s in state.learned_tasks}
        report["tasks"].append({
            "task": task.task_index,
            "classes": list(task.class_ids),
            "train_images": len(data),
            "metrics": metrics.to_json(),
            "per_task_iou": {t: {str(c): v for c, v in d.items()} for t, d in per_task.items()},
            "task_checksums": {str(s.task_index): state.task_checksum(s.task_index) for s in state.learned_tasks},
        })
        if save_checkpoints:
            save_state(state, out_dir / "checkpoints" / f"task_{task.task_index}")
        log.info("task %d done: miou_all=%s", task.task_index, metrics.miou_all)
    report["final"] = report["tasks"][-1]["metrics"]
    (out_dir / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out_dir / "metrics.csv").write_text(metrics_csv(report))
    (out_dir / "train_log.json").write_text(json.dumps(train_log))
    return {"report": report, "state": state, "test": test, "schedule": schedule, "train_log": train_log}
