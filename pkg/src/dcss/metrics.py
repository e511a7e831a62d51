"""Per-class IoU, grouped mIoU and forgetting over a task schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .synth_data import SegSample, TaskSchedule


@dataclass
class Metrics:
    per_class_iou: dict
    miou_old: float | None
    miou_new: float | None
    miou_all: float | None
    forgetting: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "miou_old": self.miou_old,
            "miou_new": self.miou_new,
            "miou_all": self.miou_all,
            "forgetting": {str(k): v for k, v in sorted(self.forgetting.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "Metrics":
        return cls({int(k): v for k, v in d["per_class_iou"].items()}, d["miou_old"], d["miou_new"],
                   d["miou_all"], {int(k): v for k, v in d.get("forgetting", {}).items()})


def visible_labels(label: np.ndarray, learned: list[int]) -> np.ndarray:
    """Ground truth as seen after learning ``learned``: unseen classes count as background."""
    return np.where(np.isin(label, learned), label, 0).astype(np.int64)


def iou_from_confusion(conf: np.ndarray, classes) -> dict:
    """TP / (TP + FP + FN); classes absent from both prediction and ground truth are omitted."""
    out = {}
    for c in classes:
        tp = conf[c, c]
        denom = conf[c, :].sum() + conf[:, c].sum() - tp
        if denom > 0:
            out[c] = float(tp / denom)
    return out


def _mean(values):
    values = list(values)
    return float(np.mean(values)) if values else None


def summarize(conf: np.ndarray, schedule: TaskSchedule, up_to_task: int, background: bool = True) -> Metrics:
    learned = schedule.classes_up_to(up_to_task)
    classes = ([0] if background else []) + learned
    iou = iou_from_confusion(conf, classes)
    base = set(schedule.task(1).class_ids) | ({0} if background else set())
    old = [v for c, v in iou.items() if c in base]
    new = [v for c, v in iou.items() if c not in base]
    return Metrics(iou, _mean(old), _mean(new) if up_to_task > 1 else None, _mean(iou.values()))


def confusion_over(samples: list[SegSample], predictions: list[np.ndarray], learned: list[int],
                   num_labels: int) -> np.ndarray:
    conf = np.zeros((num_labels, num_labels), dtype=np.int64)
    for s, pred in zip(samples, predictions):
        conf += kernels.confusion(np.asarray(pred, dtype=np.int64), visible_labels(s.label, learned), num_labels)
    return conf


def forgetting(history: list[dict]) -> dict:
    """Best earlier IoU minus final IoU, per class seen before the last step."""
    if len(history) < 2:
        return {}
    final = history[-1]
    out = {}
    for c, v in final.items():
        earlier = [h[c] for h in history[:-1] if c in h]
        if earlier:
            out[c] = float(max(earlier + [v]) - v)
    return out
