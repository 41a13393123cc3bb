"""Hand-crafted delay baselines: cross-correlation and GCC-PHAT."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import irfft, next_fast_len, rfft

from itd_tool.audio import StereoClip
from itd_tool.errors import ErrorKind, ItdError
from itd_tool.estimator import DEFAULT_MAX_LAG, DelayEstimate, aggregate_mean, aggregate_mode_ransac

logger = logging.getLogger(__name__)

PHAT_EPSILON = 1e-12


@dataclass
class CorrelationCurve:
    """R(tau) for integer lags -max_lag..max_lag."""
    lags: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.lags.shape != self.values.shape or self.lags.size % 2 != 1:
            raise ItdError(ErrorKind.SHAPE, "correlation curve must have 2*max_lag+1 entries")
        if not np.all(np.isfinite(self.values)):
            raise ItdError(ErrorKind.NON_FINITE, "correlation values")

    @property
    def max_lag(self) -> int:
        return int(self.lags[-1])

    def argmax_lag(self) -> int:
        return int(self.lags[np.argmax(self.values)])


def _correlate(x1: np.ndarray, x2: np.ndarray, max_lag: int, phat: bool) -> np.ndarray:
    """Linear correlation sum_t x1(t) x2(t - tau) along the last axis, lags -max_lag..max_lag."""
    n = x1.shape[-1]
    n_fft = next_fast_len(2 * n - 1, real=True)
    cross = rfft(x1, n_fft, axis=-1) * np.conj(rfft(x2, n_fft, axis=-1))
    if phat:
        cross = cross / np.maximum(np.abs(cross), PHAT_EPSILON)
    full = irfft(cross, n_fft, axis=-1)
    return np.concatenate([full[..., n_fft - max_lag:], full[..., :max_lag + 1]], axis=-1)


def _check_pair(x1: np.ndarray, x2: np.ndarray, max_lag: int) -> None:
    if x1.shape != x2.shape:
        raise ItdError(ErrorKind.SHAPE, f"length mismatch: {x1.shape} vs {x2.shape}")
    if max_lag < 0 or x1.shape[-1] < 2 * max_lag + 1:
        raise ItdError(ErrorKind.INVALID_INPUT,
                       f"need at least {2 * max_lag + 1} samples for max_lag {max_lag}")


def cross_correlation(x1, x2, max_lag: int) -> CorrelationCurve:
    """Plain cross-correlation R(tau) = sum_t x1(t) x2(t - tau), via FFT."""
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    _check_pair(x1, x2, max_lag)
    return CorrelationCurve(np.arange(-max_lag, max_lag + 1), _correlate(x1, x2, max_lag, phat=False))


def gcc_phat(x1, x2, max_lag: int) -> CorrelationCurve:
    """Cross-correlation of the whitened cross-power spectrum."""
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    _check_pair(x1, x2, max_lag)
    if not np.any(x1) and not np.any(x2):
        raise ItdError(ErrorKind.SILENT, "GCC-PHAT of two all-zero inputs")
    return CorrelationCurve(np.arange(-max_lag, max_lag + 1), _correlate(x1, x2, max_lag, phat=True))


def vote_offsets(n: int, window: int, votes: int) -> np.ndarray:
    """
    Start offsets of `votes` windows spread uniformly over n samples.

    The windows do not overlap when n holds `votes` of them side by side. Shorter
    clips get evenly overlapping windows instead, down to a stride of one sample
    (the 1220-sample, 1024-window, 128-vote default).
    """
    if votes < 1:
        raise ItdError(ErrorKind.INVALID_INPUT, f"votes must be >= 1, got {votes}")
    if window > n or n - window + 1 < votes:
        raise ItdError(ErrorKind.INVALID_INPUT,
                       f"{n} samples are too few for {votes} votes of {window} samples")
    if votes == 1:
        return np.array([(n - window) // 2])
    stride = (n - window) // (votes - 1)
    return np.arange(votes) * stride


def classic_estimate(clip: StereoClip, votes: int = 128, window: int = 1024, agg: str = "mean",
                     max_lag: Optional[int] = None, inlier_threshold: float = 2.0) -> DelayEstimate:
    """
    GCC-PHAT delay with per-window voting.

    The clip is sliced into `votes` windows at a uniform stride, the GCC-PHAT
    argmax lag of each window is one vote, and the votes are combined by the
    mean or mode-RANSAC aggregator.
    """
    max_lag = DEFAULT_MAX_LAG if max_lag is None else max_lag
    offsets = vote_offsets(len(clip), window, votes)
    _check_pair(clip.left.samples[:window], clip.right.samples[:window], max_lag)

    left = sliding_window_view(clip.left.samples, window)[offsets]
    right = sliding_window_view(clip.right.samples, window)[offsets]

    curves = _correlate(left, right, max_lag, phat=True)
    lags = np.argmax(curves, axis=-1) - max_lag
    vote_s = lags / clip.rate

    if agg == "mean":
        estimate = aggregate_mean(vote_s, max_delay=max_lag / clip.rate)
    elif agg == "mode":
        estimate = aggregate_mode_ransac(vote_s, inlier_threshold, clip.rate, max_delay=max_lag / clip.rate)
    else:
        raise ItdError(ErrorKind.INVALID_INPUT, f"unknown aggregation '{agg}'")
    estimate.method = f"gcc-phat/{agg}"
    return estimate
