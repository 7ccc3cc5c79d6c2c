"""Concept matrices, momentum class-mean banks and the invariance regularizers.

A sample's concept matrix holds the element-wise contributions
``M[j, c] = W[j, c] * z[j]`` whose column sums are exactly the logits. The
concept-matrix-similarity loss pulls every sample's matrix toward the running
mean of its class; the feature and logit variants do the same for ``z`` and
``o`` and exist for ablations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numerics import DimensionError, check_finite


class RegularizerKind(str, enum.Enum):
    CONCEPT_MATRIX = "concept_matrix"
    FEATURE = "feature"
    LOGIT = "logit"
    NONE = "none"


def build_concept_matrix(z: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``[D] x [D, C] -> [D, C]``; a batch ``[N, D]`` gives ``[N, D, C]``."""
    z = np.asarray(z, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or z.shape[-1] != W.shape[0] or z.ndim not in (1, 2):
        raise DimensionError(f"cannot build concept matrix from z{z.shape} and W{W.shape}")
    return z[..., :, None] * W


@dataclass
class MeanBank:
    """Per-class running means of some per-sample quantity.

    ``means[c]`` is only meaningful once ``initialized[c]`` is set; the first
    batch that contains class ``c`` sets it outright.
    """

    means: np.ndarray
    initialized: np.ndarray
    momentum: float

    @classmethod
    def empty(cls, num_classes: int, shape: tuple[int, ...], momentum: float) -> "MeanBank":
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        return cls(np.zeros((num_classes, *shape)), np.zeros(num_classes, dtype=bool), float(momentum))

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    def copy(self) -> "MeanBank":
        return MeanBank(self.means.copy(), self.initialized.copy(), self.momentum)


class RegularizerLoss(NamedTuple):
    loss: float
    grad_z: np.ndarray | None
    grad_o: np.ndarray | None
    grad_W: np.ndarray | None
    # samples skipped because their class mean is not initialized yet
    n_excluded: int
    # True when no sample had a usable class mean (loss is 0 by construction)
    no_reference: bool


def _check_labels(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.intp)


def _residuals(values: np.ndarray, labels: np.ndarray, bank: MeanBank) -> tuple[np.ndarray, np.ndarray]:
    if values.shape[1:] != bank.means.shape[1:]:
        raise DimensionError(f"values {values.shape[1:]} do not match bank entries {bank.means.shape[1:]}")
    labels = _check_labels(labels, values.shape[0], bank.num_classes)
    active = bank.initialized[labels]
    resid = values - bank.means[labels]
    resid[~active] = 0.0
    return resid, active


def cms_loss(z: np.ndarray, W: np.ndarray, labels: np.ndarray, bank: MeanBank) -> RegularizerLoss:
    """Mean squared Frobenius distance of each concept matrix to its class mean.

    ``loss = (1/N) sum_i ||M_i - Mhat_{y_i}||_F^2``, with the bank treated as a
    constant. Gradients flow into both the features and the classifier.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise DimensionError("z must be a batch [N, D]")
    n = z.shape[0]
    M = build_concept_matrix(z, W)
    resid, active = _residuals(M, labels, bank)
    loss = float(np.sum(resid * resid) / n)
    g = (2.0 / n) * resid
    grad_z = np.einsum("ndc,dc->nd", g, W)
    grad_W = np.einsum("ndc,nd->dc", g, z)
    return RegularizerLoss(loss, grad_z, None, grad_W, int(n - active.sum()), not active.any())


def _vector_loss(values: np.ndarray, labels: np.ndarray, bank: MeanBank) -> tuple[float, np.ndarray, int, bool]:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionError("expected a batch [N, K]")
    n = values.shape[0]
    resid, active = _residuals(values, labels, bank)
    return float(np.sum(resid * resid) / n), (2.0 / n) * resid, int(n - active.sum()), not active.any()


def feature_invariance_loss(z: np.ndarray, labels: np.ndarray, bank: MeanBank) -> RegularizerLoss:
    """``(1/N) sum_i ||z_i - zhat_{y_i}||^2``."""
    loss, grad, excl, none = _vector_loss(z, labels, bank)
    return RegularizerLoss(loss, grad, None, None, excl, none)


def logit_invariance_loss(o: np.ndarray, labels: np.ndarray, bank: MeanBank) -> RegularizerLoss:
    """``(1/N) sum_i ||o_i - ohat_{y_i}||^2``; the gradient enters at the logits."""
    loss, grad, excl, none = _vector_loss(o, labels, bank)
    return RegularizerLoss(loss, None, grad, None, excl, none)


def update_mean_bank(bank: MeanBank, values: np.ndarray, labels: np.ndarray) -> MeanBank:
    """Momentum update ``Mhat_c <- (1 - lam) * Mhat_c + lam * batch_mean_c``.

    Classes absent from the batch keep their mean. A class seen for the first
    time is set to its batch mean regardless of the momentum. Mutates and
    returns ``bank``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[1:] != bank.means.shape[1:]:
        raise DimensionError(f"values {values.shape[1:]} do not match bank entries {bank.means.shape[1:]}")
    labels = _check_labels(labels, values.shape[0], bank.num_classes)
    lam = bank.momentum
    for c in np.unique(labels):
        batch_mean = values[labels == c].mean(axis=0)
        if bank.initialized[c]:
            bank.means[c] = (1.0 - lam) * bank.means[c] + lam * batch_mean
        else:
            bank.means[c] = batch_mean
            bank.initialized[c] = True
    check_finite(bank.means, "mean bank")
    return bank


def bank_shape(kind: RegularizerKind, feature_dim: int, num_classes: int) -> tuple[int, ...]:
    if kind is RegularizerKind.CONCEPT_MATRIX:
        return (feature_dim, num_classes)
    if kind is RegularizerKind.FEATURE:
        return (feature_dim,)
    if kind is RegularizerKind.LOGIT:
        return (num_classes,)
    raise ValueError("the unregularized objective keeps no bank")


def bank_values(kind: RegularizerKind, z: np.ndarray, o: np.ndarray, W: np.ndarray) -> np.ndarray:
    """The per-sample quantity a bank of this kind tracks."""
    if kind is RegularizerKind.CONCEPT_MATRIX:
        return build_concept_matrix(z, W)
    if kind is RegularizerKind.FEATURE:
        return z
    if kind is RegularizerKind.LOGIT:
        return o
    raise ValueError("the unregularized objective keeps no bank")


def regularizer_loss(
    kind: RegularizerKind, z: np.ndarray, o: np.ndarray, W: np.ndarray, labels: np.ndarray, bank: MeanBank
) -> RegularizerLoss:
    if kind is RegularizerKind.CONCEPT_MATRIX:
        return cms_loss(z, W, labels, bank)
    if kind is RegularizerKind.FEATURE:
        return feature_invariance_loss(z, labels, bank)
    if kind is RegularizerKind.LOGIT:
        return logit_invariance_loss(o, labels, bank)
    raise ValueError("the unregularized objective has no regularizer loss")
