from __future__ import annotations

import numpy as np

from .data import WindowedDataset
from .model import ModelParams, forward

EVAL_CHUNK = 512


def predict_features(params: ModelParams, dataset: WindowedDataset, indices) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode ``(z, o)`` for the given samples, computed in fixed-size chunks."""
    indices = np.asarray(indices, dtype=np.int64)
    zs, os_ = [], []
    for start in range(0, len(indices), EVAL_CHUNK):
        idx = indices[start : start + EVAL_CHUNK]
        z, o, _ = forward(params, dataset.samples[idx].astype(np.float64), mode="eval")
        zs.append(z)
        os_.append(o)
    if not zs:
        d, c = params.W.shape
        return np.zeros((0, d)), np.zeros((0, c))
    return np.concatenate(zs), np.concatenate(os_)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Percent of rows whose argmax (lowest index on ties) equals the label."""
    if len(labels) == 0:
        raise ValueError("cannot compute accuracy of an empty set")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def evaluate(params: ModelParams, dataset: WindowedDataset, indices) -> float:
    """Classification accuracy in percent on ``dataset[indices]`` (eval mode, no bank)."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("cannot evaluate an empty index list")
    _, o = predict_features(params, dataset, indices)
    return accuracy_from_logits(o, dataset.class_labels[indices])
