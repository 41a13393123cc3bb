"""
Stereo and mono augmentations for self-supervised training.

Each op returns the augmented clip and an AugmentRecord holding what it drew, so
time shifts can be undone when positives are indexed and labels can follow a
channel swap.
"""
import logging
import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Dict, FrozenSet, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import fftconvolve

from itd_tool.acoustics import (ROOMS, _sample_source, add_noise, make_mixture, room_impulse_response,
                                room_preset, source_position)
from itd_tool.audio import Clip, MonoClip, StereoClip
from itd_tool.errors import ErrorKind, ItdError
from itd_tool.utils import SeedLike, _check_keys, _derive_seed, _rng

logger = logging.getLogger(__name__)

# Fixed application order.
OPERATIONS = ("swap", "scale", "shift", "noise", "reverb", "mixture")
# Below this the drawn rt60 is treated as dry.
_MIN_RT60 = 1e-3


class Side(Enum):
    """Role of an augmented input in the loss, and the ops it may receive."""
    CLEAN = "clean"
    AUGMENTED = "augmented"
    VIEW = "view"


_ALLOWED: Dict[Side, FrozenSet[str]] = {
    Side.CLEAN: frozenset({"swap", "scale"}),
    # the loss indexes this side against the other one, a shift cannot be undone
    Side.AUGMENTED: frozenset({"swap", "scale", "noise", "reverb", "mixture"}),
    Side.VIEW: frozenset(OPERATIONS),
}


@dataclass(frozen=True)
class AugmentRecord:
    swapped: bool = False
    scale_left: float = 1.0
    scale_right: float = 1.0
    shift_samples: int = 0
    noise_snr_db: Optional[float] = None
    rt60_applied: Optional[float] = None
    mixture_intensity: Optional[float] = None

    def merge(self, other: "AugmentRecord") -> "AugmentRecord":
        """Fields of `other` that differ from the defaults win."""
        default = AugmentRecord()
        changes = {f.name: getattr(other, f.name) for f in fields(self)
                   if getattr(other, f.name) != getattr(default, f.name)}
        return replace(self, **changes)

    def transform_delay(self, tau: float) -> float:
        """Label of the augmented clip given the label of the original."""
        return -tau if self.swapped else tau


def _range(value, name: str, low: float, high: float) -> Optional[Tuple[float, float]]:
    if value is None:
        return None
    if len(value) != 2:
        raise ItdError(ErrorKind.INVALID_INPUT, f"{name} must be a [low, high] pair")
    a, b = float(value[0]), float(value[1])
    if not low <= a <= b <= high:
        raise ItdError(ErrorKind.INVALID_INPUT, f"{name} [{a}, {b}] must lie in [{low}, {high}] with low <= high")
    return a, b


@dataclass(frozen=True)
class AugmentConfig:
    """
    Which augmentations run and their ranges. A None range or zero p/bound
    disables the op; the default config is the identity.
    """
    swap_p: float = 0.0
    scale_range: Optional[Tuple[float, float]] = None
    shift_bound: int = 0
    noise_snr_db: Optional[Tuple[float, float]] = None
    reverb_rt60: Optional[Tuple[float, float]] = None
    mixture_intensity: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not 0.0 <= self.swap_p <= 1.0:
            raise ItdError(ErrorKind.INVALID_INPUT, f"swap_p must be in [0, 1], got {self.swap_p}")
        if self.shift_bound < 0:
            raise ItdError(ErrorKind.INVALID_INPUT, f"shift_bound must be >= 0, got {self.shift_bound}")
        object.__setattr__(self, "scale_range", _range(self.scale_range, "scale_range", 0.0, math.inf))
        object.__setattr__(self, "noise_snr_db", _range(self.noise_snr_db, "noise_snr_db", -math.inf, math.inf))
        object.__setattr__(self, "reverb_rt60", _range(self.reverb_rt60, "reverb_rt60", 0.0, 5.0))
        object.__setattr__(self, "mixture_intensity",
                           _range(self.mixture_intensity, "mixture_intensity", 0.0, 1.0))
        if self.scale_range is not None and self.scale_range[0] <= 0:
            raise ItdError(ErrorKind.INVALID_INPUT, "scale gains must be positive")
        if self.mixture_intensity is not None and self.mixture_intensity[0] <= 0:
            raise ItdError(ErrorKind.INVALID_INPUT, "mixture intensity must be positive")

    @classmethod
    def from_mapping(cls, mapping: Dict) -> "AugmentConfig":
        _check_keys(mapping, cls.__dataclass_fields__, "augment")
        return cls(**mapping)

    @classmethod
    def regular(cls) -> "AugmentConfig":
        """Swap and rescale, applied to every model."""
        return cls(swap_p=0.5, scale_range=(0.5, 1.5))

    @classmethod
    def full(cls) -> "AugmentConfig":
        return cls(swap_p=0.5, scale_range=(0.5, 1.5), shift_bound=16, noise_snr_db=(0.0, 30.0),
                   reverb_rt60=(0.0, 0.9), mixture_intensity=(0.1, 1.0))

    def requested(self) -> FrozenSet[str]:
        enabled = {
            "swap": self.swap_p > 0,
            "scale": self.scale_range is not None,
            "shift": self.shift_bound > 0,
            "noise": self.noise_snr_db is not None,
            "reverb": self.reverb_rt60 is not None,
            "mixture": self.mixture_intensity is not None,
        }
        return frozenset(op for op, on in enabled.items() if on)

    def only(self, *ops: str) -> "AugmentConfig":
        """Copy with every op outside `ops` disabled."""
        unknown = set(ops) - set(OPERATIONS)
        if unknown:
            raise ItdError(ErrorKind.INVALID_INPUT, f"unknown augmentations {sorted(unknown)}")
        return AugmentConfig(
            swap_p=self.swap_p if "swap" in ops else 0.0,
            scale_range=self.scale_range if "scale" in ops else None,
            shift_bound=self.shift_bound if "shift" in ops else 0,
            noise_snr_db=self.noise_snr_db if "noise" in ops else None,
            reverb_rt60=self.reverb_rt60 if "reverb" in ops else None,
            mixture_intensity=self.mixture_intensity if "mixture" in ops else None,
        )


def channel_swap(clip: Clip, p: float = 0.5, seed: SeedLike = 0) -> Tuple[Clip, AugmentRecord]:
    """Exchange left and right with probability p. Mono clips pass through."""
    swapped = bool(_rng(seed).random() < p)
    if not swapped or isinstance(clip, MonoClip):
        return clip, AugmentRecord()
    return StereoClip(clip.right, clip.left), AugmentRecord(swapped=True)


def channel_scale(clip: Clip, scale_range: Tuple[float, float] = (0.5, 1.5),
                  seed: SeedLike = 0) -> Tuple[Clip, AugmentRecord]:
    """Independent uniform gain per channel."""
    rng = _rng(seed)
    low, high = scale_range
    left, right = (float(g) for g in rng.uniform(low, high, size=2))
    if isinstance(clip, MonoClip):
        return clip.with_array(clip.samples * left), AugmentRecord(scale_left=left, scale_right=left)
    data = clip.as_array() * np.array([[left], [right]])
    return clip.with_array(data), AugmentRecord(scale_left=left, scale_right=right)


def time_shift(clip: Clip, bound: int = 16, seed: SeedLike = 0,
               multiple: int = 1) -> Tuple[Clip, AugmentRecord]:
    """
    Circular shift by an integer in [-bound, bound], drawn among multiples of
    `multiple`. The shifted clip satisfies out[i] = clip[i - shift].
    """
    if multiple < 1:
        raise ItdError(ErrorKind.INVALID_INPUT, f"multiple must be >= 1, got {multiple}")
    top = bound // multiple
    shift = int(_rng(seed).integers(-top, top + 1)) * multiple
    return clip.with_array(np.roll(clip.as_array(), shift, axis=-1)), AugmentRecord(shift_samples=shift)


def noise_aug(clip: Clip, snr_range: Tuple[float, float] = (0.0, 30.0),
              seed: SeedLike = 0) -> Tuple[Clip, AugmentRecord]:
    rng = _rng(seed)
    snr = float(rng.uniform(*snr_range))
    return add_noise(clip, snr, seed=rng), AugmentRecord(noise_snr_db=snr)


def reverb_aug(clip: Clip, rt60_range: Tuple[float, float] = (0.0, 0.9),
               seed: SeedLike = 0) -> Tuple[Clip, AugmentRecord]:
    """
    Convolve with one simulated response from a random room preset. Stereo clips
    get the same filter on both channels, so their delay label is unchanged.
    """
    rng = _rng(seed)
    rt60 = float(rng.uniform(*rt60_range))
    if rt60 < _MIN_RT60:
        return clip, AugmentRecord(rt60_applied=0.0)

    room = room_preset(int(rng.choice(sorted(ROOMS))), rt60)
    position = source_position(room, _sample_source(rng, room))
    rir = room_impulse_response(room, position, clip.rate, seed=rng, align_direct=True)[0]
    data = np.atleast_2d(clip.as_array())
    out = np.stack([fftconvolve(ch, rir)[:data.shape[1]] for ch in data])
    return clip.with_array(out.reshape(clip.as_array().shape)), AugmentRecord(rt60_applied=rt60)


def _fit_length(distractor: Clip, n: int, rng: np.random.Generator) -> np.ndarray:
    data = distractor.as_array()
    if data.shape[-1] >= n:
        start = int(rng.integers(0, data.shape[-1] - n + 1))
        return data[..., start:start + n]
    reps = -(-n // data.shape[-1])
    return np.tile(data, (1,) * (data.ndim - 1) + (reps,))[..., :n]


def mixture_aug(clip: Clip, pool: Sequence[Clip], intensity_range: Tuple[float, float] = (0.1, 1.0),
                seed: SeedLike = 0) -> Tuple[Clip, AugmentRecord]:
    """Add a random pool clip (cropped or tiled to length) at a random relative loudness."""
    if not pool:
        raise ItdError(ErrorKind.INVALID_INPUT, "mixture augmentation needs a non-empty pool")
    rng = _rng(seed)
    distractor = pool[int(rng.integers(0, len(pool)))]
    intensity = float(rng.uniform(*intensity_range))
    if distractor.as_array().ndim != clip.as_array().ndim or distractor.rate != clip.rate:
        raise ItdError(ErrorKind.SHAPE, "pool clips must match the clip's channel count and rate")
    fitted = clip.with_array(_fit_length(distractor, len(clip), rng))
    return make_mixture(clip, fitted, intensity), AugmentRecord(mixture_intensity=intensity)


def pipeline(clip: Clip, config: AugmentConfig, side: Side, seed: int = 0,
             pool: Optional[Sequence[Clip]] = None, shift_multiple: int = 1) -> Tuple[Clip, AugmentRecord]:
    """
    Apply the enabled augmentations in the fixed order swap, scale, shift, noise,
    reverb, mixture.

    Raises:
        ItdError(POLICY): the config enables an op the side may not receive.
    """
    forbidden = config.requested() - _ALLOWED[side]
    if forbidden:
        raise ItdError(ErrorKind.POLICY, f"{', '.join(sorted(forbidden))} on the {side.value} side")

    steps = {
        "swap": lambda c, s: channel_swap(c, config.swap_p, s),
        "scale": lambda c, s: channel_scale(c, config.scale_range, s),
        "shift": lambda c, s: time_shift(c, config.shift_bound, s, shift_multiple),
        "noise": lambda c, s: noise_aug(c, config.noise_snr_db, s),
        "reverb": lambda c, s: reverb_aug(c, config.reverb_rt60, s),
        "mixture": lambda c, s: mixture_aug(c, pool or [], config.mixture_intensity, s),
    }
    record = AugmentRecord()
    requested = config.requested()
    for index, op in enumerate(OPERATIONS):
        if op in requested:
            clip, applied = steps[op](clip, _derive_seed(seed, index))
            record = record.merge(applied)
    return clip, record
