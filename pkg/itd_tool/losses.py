"""
Affinity matrices and the self-supervised losses over embedding sequences.

Every loss returns a LossResult whose grads are d(loss)/d(embedding rows), in
the order the embedding sets were passed in.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from itd_tool.errors import ErrorKind, ItdError

DEFAULT_TEMPERATURE = 0.05
LOG_FLOOR = 1e-12


@dataclass
class AffinityMatrix:
    """Row-stochastic transitions from `rows` embeddings to `cols` embeddings."""
    values: np.ndarray
    temperature: float
    rows: np.ndarray
    cols: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class LossResult:
    value: float
    grads: Tuple[np.ndarray, ...]


def _vectors(h) -> np.ndarray:
    return np.asarray(getattr(h, "vectors", h), dtype=float)


def affinity(h_from, h_to, c: float = DEFAULT_TEMPERATURE) -> AffinityMatrix:
    """A(s, t) = softmax over t of h_from(s) . h_to(t) / c."""
    rows, cols = _vectors(h_from), _vectors(h_to)
    if rows.ndim != 2 or rows.shape != cols.shape:
        raise ItdError(ErrorKind.SHAPE, f"embedding sets differ: {rows.shape} vs {cols.shape}")
    if c <= 0:
        raise ItdError(ErrorKind.INVALID_INPUT, f"temperature must be positive, got {c}")
    return AffinityMatrix(softmax(rows @ cols.T / c, axis=1), c, rows, cols)


def _affinity_backward(a: AffinityMatrix, d_values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. (rows, cols) given d(loss)/d(values)."""
    weighted = (d_values * a.values).sum(axis=1, keepdims=True)
    d_logits = a.values * (d_values - weighted) / a.temperature
    return d_logits @ a.cols, d_logits.T @ a.rows


def _log_diagonal(diag: np.ndarray) -> Tuple[float, np.ndarray]:
    """-(1/n) sum log(max(diag, floor)) and its derivative w.r.t. diag."""
    n = diag.shape[0]
    floored = np.maximum(diag, LOG_FLOOR)
    d_diag = np.where(diag > LOG_FLOOR, -1.0 / (n * floored), 0.0)
    return float(-np.mean(np.log(floored))), d_diag


def crw_loss(a12: AffinityMatrix, a21: AffinityMatrix) -> LossResult:
    """
    Cycle-consistency loss -(1/n) trace(log(A12 A21)).

    Returns:
        LossResult with grads (d/dH1, d/dH2), where H1 are a12's rows and H2 its cols.
    """
    if a12.values.shape != a21.values.shape or a12.values.shape[0] != a12.values.shape[1]:
        raise ItdError(ErrorKind.SHAPE, "crw loss needs two conformable n x n affinities")

    round_trip = np.einsum("ik,ki->i", a12.values, a21.values)
    value, d_diag = _log_diagonal(round_trip)

    d_a12 = d_diag[:, None] * a21.values.T
    d_a21 = a12.values.T * d_diag[None, :]
    g1_rows, g2_cols = _affinity_backward(a12, d_a12)
    g2_rows, g1_cols = _affinity_backward(a21, d_a21)
    return LossResult(value, (g1_rows + g1_cols, g2_cols + g2_rows))


def zero_loss(a12: AffinityMatrix) -> LossResult:
    """Slow-feature loss -(1/n) trace(log A12): co-occurring nodes should match."""
    if a12.values.shape[0] != a12.values.shape[1]:
        raise ItdError(ErrorKind.SHAPE, "zero loss needs an n x n affinity")
    value, d_diag = _log_diagonal(np.diag(a12.values).copy())
    g_rows, g_cols = _affinity_backward(a12, np.diag(d_diag))
    return LossResult(value, (g_rows, g_cols))


def monoclr_loss(h, h_aug, shift: int, step: int, c: float = DEFAULT_TEMPERATURE) -> LossResult:
    """
    Instance discrimination between a mono clip and its augmented view.

    The view was circularly shifted by `shift` samples, so the positive of node t
    is view node t + shift / step. Nodes whose partner falls outside the view are
    dropped. Negatives are all nodes of the same view.
    """
    anchors, view = _vectors(h), _vectors(h_aug)
    if anchors.ndim != 2 or anchors.shape != view.shape:
        raise ItdError(ErrorKind.SHAPE, f"embedding sets differ: {anchors.shape} vs {view.shape}")
    if step < 1 or shift % step != 0:
        raise ItdError(ErrorKind.INVALID_INPUT, f"shift {shift} is not a multiple of the window step {step}")

    n = anchors.shape[0]
    positives = np.arange(n) + shift // step
    valid = (positives >= 0) & (positives < n)
    m = int(valid.sum())
    if m < 2:
        raise ItdError(ErrorKind.INVALID_INPUT, f"shift {shift} leaves fewer than 2 aligned nodes")

    kept = anchors[valid]
    log_p = log_softmax(kept @ view.T / c, axis=1)
    value = float(-np.mean(log_p[np.arange(m), positives[valid]]))

    d_logits = np.exp(log_p)
    d_logits[np.arange(m), positives[valid]] -= 1.0
    d_logits /= m * c
    d_anchors = np.zeros_like(anchors)
    d_anchors[valid] = d_logits @ view
    return LossResult(value, (d_anchors, d_logits.T @ kept))
