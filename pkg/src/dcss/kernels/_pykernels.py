"""Numpy implementations of the per-pixel inference kernels."""
import numpy as np


def select_rows(S):
    S = np.asarray(S, dtype=np.float64)
    selected = (S != 0).any(axis=1)
    # argmax keeps the first maximum: ties go to the smallest class index
    cls = np.where(selected, np.argmax(S, axis=1), -1).astype(np.int64)
    return selected, cls


def aggregate_labels(masks, confidences, class_ids, threshold):
    masks = np.asarray(masks, dtype=np.float64)
    K = masks.shape[0]
    if K == 0:
        raise ValueError("aggregate_labels needs at least one mask")
    class_ids = np.asarray(class_ids, dtype=np.int64)
    confidences = np.asarray(confidences, dtype=np.float64)
    order = np.argsort(class_ids, kind="stable")
    covered = masks[order] >= threshold
    score = np.where(covered, confidences[order][:, None, None], -np.inf)
    winner = np.argmax(score, axis=0)
    label = class_ids[order][winner]
    return np.where(covered.any(axis=0), label, 0).astype(np.int64)


def confusion(pred, gt, num_labels):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if gt.size != pred.size:
        raise ValueError("pred and gt sizes differ")
    if pred.size and (pred.max() >= num_labels or gt.max() >= num_labels or min(pred.min(), gt.min()) < 0):
        raise ValueError("label out of range")
    return np.bincount(gt * num_labels + pred, minlength=num_labels * num_labels).reshape(num_labels, num_labels)
