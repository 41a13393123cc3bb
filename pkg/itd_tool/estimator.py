"""Votes, aggregation, angle conversion and the IID baseline."""
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Sequence

import numpy as np

from itd_tool.audio import StereoClip
from itd_tool.embedder import embed_sequence
from itd_tool.errors import ErrorKind, ItdError
from itd_tool.losses import affinity
from itd_tool.utils import _check_keys, _clamp

logger = logging.getLogger(__name__)

AGGREGATIONS = ("mean", "mode")
VOTE_MODES = ("argmax", "expectation")
_TOLERANCE = 1e-12
DEFAULT_MAX_LAG = 26  # 0.3 m spacing at 16 kHz, plus margin


class Direction(Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass
class DelayEstimate:
    """Aggregated delay in seconds, with the per-node votes it came from."""
    delay_s: float
    votes: np.ndarray
    method: str
    inlier_count: Optional[int] = None
    angle_deg: Optional[float] = None
    max_delay_s: Optional[float] = None

    def __post_init__(self):
        self.votes = np.asarray(self.votes, dtype=float)
        if self.votes.size == 0:
            raise ItdError(ErrorKind.INVALID_INPUT, "an estimate needs at least one vote")
        if self.max_delay_s is not None and abs(self.delay_s) > self.max_delay_s + _TOLERANCE:
            raise ItdError(ErrorKind.INVALID_INPUT,
                           f"delay {self.delay_s} exceeds max delay {self.max_delay_s}")

    @property
    def delay_ms(self) -> float:
        return 1e3 * self.delay_s

    def to_record(self) -> Dict:
        record = {"delay_ms": self.delay_ms, "method": self.method, "n_votes": int(self.votes.size)}
        if self.angle_deg is not None:
            record["angle_deg"] = self.angle_deg
        if self.inlier_count is not None:
            record["inlier_count"] = self.inlier_count
        return record

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


@dataclass
class EstimatorConfig:
    """How a clip is turned into one delay. Lengths are in samples."""
    window: int = 1024
    step: int = 1
    votes: int = 128
    input_len: int = 1220
    agg: str = "mode"
    vote_mode: str = "expectation"
    inlier_threshold: float = 2.0
    max_delay_samples: Optional[int] = None
    temperature: float = 0.05

    def __post_init__(self):
        if self.agg not in AGGREGATIONS:
            raise ItdError(ErrorKind.INVALID_INPUT, f"agg must be one of {AGGREGATIONS}, got '{self.agg}'")
        if self.vote_mode not in VOTE_MODES:
            raise ItdError(ErrorKind.INVALID_INPUT,
                           f"vote_mode must be one of {VOTE_MODES}, got '{self.vote_mode}'")
        if min(self.window, self.step, self.votes, self.input_len) < 1 or self.temperature <= 0:
            raise ItdError(ErrorKind.INVALID_INPUT, "estimator sizes and temperature must be positive")

    @classmethod
    def from_mapping(cls, mapping: Dict) -> "EstimatorConfig":
        _check_keys(mapping, cls.__dataclass_fields__, "estimator")
        return cls(**mapping)


def vote_delays(transitions, step: int, rate: int, mode: str = "expectation",
                max_delay: Optional[float] = None) -> np.ndarray:
    """
    One delay vote per row s of an affinity matrix.

    Candidate delays are tau(s, t) = (t - s) * step / rate, restricted to
    |tau| <= max_delay. "argmax" keeps the most probable candidate,
    "expectation" renormalizes the restricted row and returns sum tau * p.

    Returns:
        Votes in seconds, one per row.
    """
    values = np.asarray(getattr(transitions, "values", transitions), dtype=float)
    if values.ndim != 2:
        raise ItdError(ErrorKind.SHAPE, f"affinity must be 2-D, got {values.shape}")
    n_rows, n_cols = values.shape
    taus = (np.arange(n_cols)[None, :] - np.arange(n_rows)[:, None]) * step / rate
    support = np.ones_like(taus, dtype=bool) if max_delay is None \
        else np.abs(taus) <= max_delay + _TOLERANCE
    if not np.all(support.any(axis=1)):
        raise ItdError(ErrorKind.INVALID_INPUT, f"max delay {max_delay} leaves a row without candidates")

    restricted = np.where(support, values, 0.0)
    if mode == "argmax":
        picked = np.argmax(np.where(support, values, -np.inf), axis=1)
        return taus[np.arange(n_rows), picked]
    if mode == "expectation":
        mass = restricted.sum(axis=1)
        if np.any(mass <= 0):
            raise ItdError(ErrorKind.INVALID_INPUT, "restricted row holds no probability mass")
        return (restricted * taus).sum(axis=1) / mass
    raise ItdError(ErrorKind.INVALID_INPUT, f"unknown vote mode '{mode}'")


def aggregate_mean(votes: Sequence[float], max_delay: Optional[float] = None) -> DelayEstimate:
    votes = np.asarray(votes, dtype=float)
    if votes.size == 0:
        raise ItdError(ErrorKind.INVALID_INPUT, "no votes to aggregate")
    return DelayEstimate(delay_s=float(np.mean(votes)), votes=votes, method="mean", max_delay_s=max_delay)


def aggregate_mode_ransac(votes: Sequence[float], inlier_threshold: float = 2.0, rate: int = 16000,
                          max_delay: Optional[float] = None) -> DelayEstimate:
    """
    Most-voted 1-sample bin, then the mean of the votes within inlier_threshold
    samples of its center.

    Bin ties go to the center closest to the vote median, then to the smaller
    |tau|, then to the smaller signed value.
    """
    votes = np.asarray(votes, dtype=float)
    if votes.size == 0:
        raise ItdError(ErrorKind.INVALID_INPUT, "no votes to aggregate")
    in_samples = votes * rate
    centers, counts = np.unique(np.floor(in_samples + 0.5), return_counts=True)
    candidates = centers[counts == counts.max()]
    median = float(np.median(in_samples))
    best = min(candidates, key=lambda c: (abs(c - median), abs(c), c))

    inliers = np.abs(in_samples - best) <= inlier_threshold
    delay = float(np.mean(in_samples[inliers])) / rate
    return DelayEstimate(delay_s=delay, votes=votes, method="mode",
                         inlier_count=int(inliers.sum()), max_delay_s=max_delay)


def delay_to_angle(delay_s: float, mic_distance_m: float, c: float = 343.0) -> float:
    """Far-field arrival angle in degrees, positive towards the right microphone."""
    if mic_distance_m <= 0:
        raise ItdError(ErrorKind.GEOMETRY, "mic distance must be positive")
    ratio = delay_s * c / mic_distance_m
    if abs(ratio) > 1.0:
        logger.warning("delay %.6f s exceeds the mic-pair limit, clamping to +-90 degrees", delay_s)
        ratio = _clamp(ratio, -1.0, 1.0)
    return math.degrees(math.asin(ratio))


def iid_direction(clip: StereoClip) -> Direction:
    """The louder channel by RMS; an exact tie counts as right."""
    left = float(np.sqrt(np.mean(clip.left.samples ** 2)))
    right = float(np.sqrt(np.mean(clip.right.samples ** 2)))
    if left == 0 and right == 0:
        raise ItdError(ErrorKind.SILENT, "silent clip")
    return Direction.LEFT if left > right else Direction.RIGHT


def estimate_delay(params, clip: StereoClip, window: int = 1024, step: int = 1, agg: str = "mode",
                   vote_mode: str = "expectation", max_delay: Optional[float] = None,
                   temperature: float = 0.05, inlier_threshold: float = 2.0,
                   mic_distance: Optional[float] = None) -> DelayEstimate:
    """
    Learned-embedding delay of a stereo clip.

    Both channels are embedded with a sliding window, and the walk goes from right
    nodes s to left nodes t, so tau(s, t) = (t - s) * step / rate reads directly
    in the package sign convention (positive: right mic leads).
    """
    if len(clip) < window + step:
        raise ItdError(ErrorKind.INVALID_INPUT, f"clip of {len(clip)} samples is shorter than window {window}")
    max_delay = default_max_lag(None, clip.rate) / clip.rate if max_delay is None else max_delay

    h_left = embed_sequence(params, clip.left, window, step)
    h_right = embed_sequence(params, clip.right, window, step)
    votes = vote_delays(affinity(h_right, h_left, temperature), step, clip.rate, vote_mode, max_delay)

    if agg == "mean":
        estimate = aggregate_mean(votes, max_delay=max_delay)
    elif agg == "mode":
        estimate = aggregate_mode_ransac(votes, inlier_threshold, clip.rate, max_delay=max_delay)
    else:
        raise ItdError(ErrorKind.INVALID_INPUT, f"unknown aggregation '{agg}'")
    estimate.method = f"model/{agg}/{vote_mode}"
    if mic_distance is not None:
        estimate.angle_deg = delay_to_angle(estimate.delay_s, mic_distance)
    return estimate



def default_max_lag(mic_spacing: Optional[float] = None, rate: int = 16000,
                    speed_of_sound: float = 343.0) -> int:
    """ceil(spacing / c * rate) + 2 samples when the geometry is known, else 26."""
    if mic_spacing is None:
        return DEFAULT_MAX_LAG
    return int(math.ceil(mic_spacing / speed_of_sound * rate)) + 2
