"""
Labeled stereo scene simulation.

Sign convention used across the package: a positive delay tau means the sound
reaches the right microphone first, i.e. the left channel lags the right one.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.signal import butter, fftconvolve, sosfilt

from itd_tool.audio import DEFAULT_RATE, Clip, MonoClip, StereoClip
from itd_tool.errors import ErrorKind, ItdError
from itd_tool.utils import SeedLike, _check_keys, _derive_seed, _rng

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
MAX_ORDER = 10
SINC_TAPS = 64
MAX_ABSORPTION = 0.99
_LN_1E6 = 6.0 * math.log(10.0)  # 60 dB of energy, as an amplitude exponent

Vector = Tuple[float, float, float]


def _strictly_inside(dims: np.ndarray, point: np.ndarray) -> bool:
    return bool(np.all(point > 0) and np.all(point < dims))


@dataclass(frozen=True)
class RoomConfig:
    """Shoebox room with one microphone pair."""
    dims: Vector
    mic_left: Vector
    mic_right: Vector
    rt60: float = 0.0
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        dims = np.asarray(self.dims, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise ItdError(ErrorKind.GEOMETRY, f"room dims must be 3 positive values, got {self.dims}")
        for name in ("mic_left", "mic_right"):
            if not _strictly_inside(dims, np.asarray(getattr(self, name), dtype=float)):
                raise ItdError(ErrorKind.GEOMETRY, f"{name} {getattr(self, name)} is not inside the room")
        if self.rt60 < 0:
            raise ItdError(ErrorKind.INVALID_INPUT, f"rt60 must be >= 0, got {self.rt60}")
        if self.speed_of_sound <= 0:
            raise ItdError(ErrorKind.INVALID_INPUT, "speed of sound must be positive")

    @property
    def mic_spacing(self) -> float:
        return float(np.linalg.norm(np.subtract(self.mic_right, self.mic_left)))

    @property
    def volume(self) -> float:
        x, y, h = self.dims
        return x * y * h

    @property
    def surface(self) -> float:
        x, y, h = self.dims
        return 2.0 * (x * y + x * h + y * h)

    def with_rt60(self, rt60: float) -> "RoomConfig":
        return replace(self, rt60=float(rt60))


# The three simulated rooms (dims, left mic, right mic), meters.
ROOMS: Dict[int, RoomConfig] = {
    1: RoomConfig((7.0, 6.0, 3.0), (3.4, 1.0, 1.6), (3.7, 1.0, 1.6)),
    2: RoomConfig((4.0, 7.0, 2.8), (0.2, 3.2, 1.7), (0.2, 3.0, 1.7)),
    3: RoomConfig((7.0, 7.0, 2.7), (3.4, 3.1, 1.5), (3.5, 2.9, 1.5)),
}


def room_preset(room_id: int, rt60: float = 0.0) -> RoomConfig:
    if room_id not in ROOMS:
        raise ItdError(ErrorKind.INVALID_INPUT, f"unknown room {room_id}, expected one of {sorted(ROOMS)}")
    return ROOMS[room_id].with_rt60(rt60)


@dataclass(frozen=True)
class SourceSpec:
    """Source placed by angle (degrees, positive towards the right mic) and distance (m)."""
    angle: float
    distance: float
    gain: float = 1.0

    def __post_init__(self):
        if not -90.0 <= self.angle <= 90.0:
            raise ItdError(ErrorKind.GEOMETRY, f"angle {self.angle} outside [-90, 90]")
        if not 0.5 <= self.distance <= 3.0:
            raise ItdError(ErrorKind.GEOMETRY, f"distance {self.distance} outside [0.5, 3.0]")


@dataclass
class Scene:
    room: RoomConfig
    sources: List[SourceSpec]
    snr_db: float = math.inf
    seed: int = 0

    def __post_init__(self):
        if not self.sources:
            raise ItdError(ErrorKind.INVALID_INPUT, "a scene needs at least one source")


def _broadside_axes(room: RoomConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mic midpoint, unit vector left->right, and the horizontal broadside facing the room."""
    left = np.asarray(room.mic_left, dtype=float)
    right = np.asarray(room.mic_right, dtype=float)
    mid = (left + right) / 2.0
    axis = right - left
    axis[2] = 0.0
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise ItdError(ErrorKind.GEOMETRY, "microphones are stacked vertically")
    axis /= norm
    broadside = np.array([-axis[1], axis[0], 0.0])
    center = np.asarray(room.dims, dtype=float) / 2.0
    if np.dot(broadside, center - mid) < 0:
        broadside = -broadside
    return mid, axis, broadside


def source_position(room: RoomConfig, source: SourceSpec) -> np.ndarray:
    mid, axis, broadside = _broadside_axes(room)
    theta = math.radians(source.angle)
    return mid + source.distance * (math.cos(theta) * broadside + math.sin(theta) * axis)


def ground_truth_tdoa(room: RoomConfig, source: Union[SourceSpec, Sequence[float]]) -> float:
    """(|p - left| - |p - right|) / c, seconds."""
    position = source_position(room, source) if isinstance(source, SourceSpec) \
        else np.asarray(source, dtype=float)
    d_left = float(np.linalg.norm(position - np.asarray(room.mic_left)))
    d_right = float(np.linalg.norm(position - np.asarray(room.mic_right)))
    if min(d_left, d_right) < 1e-9:
        raise ItdError(ErrorKind.GEOMETRY, "source coincides with a microphone")
    return (d_left - d_right) / room.speed_of_sound


def rt60_to_absorption(room: RoomConfig) -> float:
    """Sabine inversion alpha = 0.161 V / (S RT60), clamped to (0, 0.99]."""
    if room.rt60 <= 0:
        raise ItdError(ErrorKind.INVALID_INPUT, "rt60 = 0 is rendered anechoic, no absorption defined")
    alpha = 0.161 * room.volume / (room.surface * room.rt60)
    return min(alpha, MAX_ABSORPTION)


def _image_sources(room: RoomConfig, position: np.ndarray, max_order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Image positions (M, 3) and reflection orders (M,) up to max_order."""
    idx = np.arange(-max_order, max_order + 1)
    m = np.array(np.meshgrid(idx, idx, idx, indexing="ij")).reshape(3, -1).T
    order = np.abs(m).sum(axis=1)
    keep = order <= max_order
    m, order = m[keep], order[keep]

    dims = np.asarray(room.dims, dtype=float)
    even = (m % 2) == 0
    images = np.where(even, m * dims + position, (m + 1) * dims - position)
    return images, order


def _windowed_sinc(h: np.ndarray, delays: np.ndarray, gains: np.ndarray) -> None:
    """Accumulate gains at fractional delays into h with a 64-tap Hann-windowed sinc."""
    half = SINC_TAPS // 2
    offsets = np.arange(-half + 1, half + 1)
    taps = np.floor(delays)[:, None].astype(int) + offsets[None, :]
    t = taps - delays[:, None]
    values = np.sinc(t) * 0.5 * (1.0 + np.cos(np.pi * t / half)) * gains[:, None]
    valid = (taps >= 0) & (taps < h.shape[0])
    np.add.at(h, taps[valid], values[valid])


def room_impulse_response(room: RoomConfig, position: Sequence[float], rate: int = DEFAULT_RATE,
                          seed: SeedLike = 0, max_order: int = MAX_ORDER,
                          align_direct: bool = False) -> np.ndarray:
    """
    Impulse responses from a source to both microphones.

    Image sources up to max_order (order 0 only when rt60 == 0) carry gain
    (1 - alpha)^(order / 2) / (4 pi r). For rt60 > 0 the images are kept until the
    expansion is complete, (max_order + 1) * min(dims) / c, and a Gaussian late
    tail decaying 60 dB per rt60 continues from there at the matching level.

    Args:
        align_direct: shift both responses so that the earliest direct path lands
                      on sample 0 with unit gain (used for reverb augmentation).

    Returns:
        (2, n) array, rows left and right.
    """
    position = np.asarray(position, dtype=float)
    if not _strictly_inside(np.asarray(room.dims, dtype=float), position):
        raise ItdError(ErrorKind.GEOMETRY, f"source {position.tolist()} is outside the room")
    c = room.speed_of_sound
    mics = [np.asarray(room.mic_left, dtype=float), np.asarray(room.mic_right, dtype=float)]
    rng = _rng(seed)

    if room.rt60 > 0:
        images, order = _image_sources(room, position, max_order)
        reflection = math.sqrt(1.0 - rt60_to_absorption(room))
        t_complete = (max_order + 1) * min(room.dims) / c
    else:
        images, order = position[None, :], np.zeros(1, dtype=int)
        reflection, t_complete = 0.0, 0.0

    distances = [np.linalg.norm(images - mic, axis=1) for mic in mics]
    direct = min(float(np.linalg.norm(position - mic)) for mic in mics)
    shift = direct / c * rate if align_direct else 0.0
    scale = 4.0 * math.pi * direct if align_direct else 1.0

    if room.rt60 > 0:
        n = int(math.ceil((t_complete + room.rt60) * rate)) + SINC_TAPS
    else:
        n = int(math.ceil(max(float(d.max()) for d in distances) / c * rate - shift)) + SINC_TAPS

    out = np.zeros((2, n))
    for ch, r in enumerate(distances):
        keep = r / c < t_complete if room.rt60 > 0 else np.ones_like(r, dtype=bool)
        gains = scale * reflection ** order[keep] / (4.0 * math.pi * r[keep])
        _windowed_sinc(out[ch], r[keep] / c * rate - shift, gains)

        if room.rt60 > 0:
            start = int(t_complete * rate - shift)
            span = max(int(0.02 * rate), 1)
            level = math.sqrt(float(np.mean(out[ch, max(start - span, 0):start] ** 2)))
            t = np.arange(n - start) / rate
            out[ch, start:] += level * rng.standard_normal(n - start) * np.exp(-_LN_1E6 / 2.0 * t / room.rt60)
    return out


def schroeder_curve(rir: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay of a 1-D response, dB relative to the total."""
    energy = np.cumsum(np.asarray(rir, dtype=float)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def estimate_rt60(rir: np.ndarray, rate: int, upper_db: float = -5.0, lower_db: float = -35.0) -> float:
    """Line fit of the decay curve between upper_db and lower_db, extrapolated to -60 dB."""
    curve = schroeder_curve(rir)
    span = np.flatnonzero((curve <= upper_db) & (curve >= lower_db))
    if span.size < 2:
        raise ItdError(ErrorKind.FAILED, "decay curve does not span the fit range")
    slope, _ = np.polyfit(span / rate, curve[span], 1)
    return -60.0 / slope


def add_noise(clip: Clip, snr_db: float, seed: SeedLike = 0) -> Clip:
    """Independent white Gaussian noise per channel, scaled to exactly snr_db per channel."""
    data = np.atleast_2d(clip.as_array())
    power = np.mean(data ** 2, axis=1, keepdims=True)
    if np.any(power == 0):
        raise ItdError(ErrorKind.SILENT, "SNR is undefined for a silent channel")
    rng = _rng(seed)
    noise = rng.standard_normal(data.shape)
    noise *= np.sqrt(power / 10.0 ** (snr_db / 10.0) / np.mean(noise ** 2, axis=1, keepdims=True))
    return clip.with_array((data + noise).reshape(clip.as_array().shape))


def rms(clip: Clip) -> float:
    return float(np.sqrt(np.mean(clip.as_array() ** 2)))


def make_mixture(dominant: Clip, distractor: Clip, intensity: float) -> Clip:
    """Add distractor rescaled to intensity x RMS(dominant). The dominant source is the label."""
    if not 0.0 < intensity <= 1.0:
        raise ItdError(ErrorKind.INVALID_INPUT, f"intensity must be in (0, 1], got {intensity}")
    if dominant.as_array().shape != distractor.as_array().shape or dominant.rate != distractor.rate:
        raise ItdError(ErrorKind.SHAPE, "dominant and distractor must share length, channels and rate")
    target = rms(dominant)
    current = rms(distractor)
    if target == 0 or current == 0:
        raise ItdError(ErrorKind.SILENT, "cannot rescale against a silent clip")
    return dominant.with_array(dominant.as_array() + distractor.as_array() * (intensity * target / current))


def render_scene(scene: Scene, signals: Sequence[MonoClip]) -> Tuple[StereoClip, List[float]]:
    """
    Render every source through the room into a stereo clip, then add noise.

    Returns:
        The stereo clip (length of the source signals) and the direct-path tau per source.
    """
    if len(signals) != len(scene.sources):
        raise ItdError(ErrorKind.INVALID_INPUT,
                       f"{len(scene.sources)} sources but {len(signals)} signals")
    rates = {s.rate for s in signals}
    lengths = {len(s) for s in signals}
    if len(rates) != 1:
        raise ItdError(ErrorKind.INVALID_INPUT, f"signals have mismatched rates {sorted(rates)}")
    if len(lengths) != 1:
        raise ItdError(ErrorKind.SHAPE, f"signals have mismatched lengths {sorted(lengths)}")
    rate, n = rates.pop(), lengths.pop()

    out = np.zeros((2, n))
    taus = []
    for i, (source, signal) in enumerate(zip(scene.sources, signals)):
        position = source_position(scene.room, source)
        rir = room_impulse_response(scene.room, position, rate, seed=_derive_seed(scene.seed, i))
        for ch in range(2):
            out[ch] += source.gain * fftconvolve(signal.samples, rir[ch])[:n]
        taus.append(ground_truth_tdoa(scene.room, position))

    clip = StereoClip.from_array(out, rate)
    if math.isfinite(scene.snr_db):
        clip = add_noise(clip, scene.snr_db, seed=_derive_seed(scene.seed, 10_000))
    return clip, taus


def speech_like_source(n: int, rate: int = DEFAULT_RATE, seed: SeedLike = 0) -> MonoClip:
    """Band-limited noise (100-4000 Hz) under a syllable-rate burst envelope, peak 0.5."""
    rng = _rng(seed)
    sos = butter(4, [100.0, min(4000.0, 0.45 * rate)], btype="band", fs=rate, output="sos")
    band = sosfilt(sos, rng.standard_normal(n))

    segment = max(int(0.06 * rate), 1)
    knots = rng.uniform(0.1, 1.0, size=n // segment + 2)
    envelope = np.interp(np.arange(n) / segment, np.arange(knots.size), knots)
    signal = band * envelope
    return MonoClip(0.5 * signal / np.max(np.abs(signal)), rate)


#region Scene manifests
@dataclass
class SceneRecord:
    """One manifest row. snr_db None means noiseless; tdoa_ms is the dominant source's."""
    clip_id: str
    room: int
    sources: List[Dict[str, float]]
    snr_db: Optional[float]
    rt60: float
    seed: int
    tdoa_ms: float
    mixture_intensity: Optional[float] = None
    wav: Optional[str] = None

    def scene(self) -> Scene:
        return Scene(room=room_preset(self.room, self.rt60),
                     sources=[SourceSpec(**s) for s in self.sources],
                     snr_db=math.inf if self.snr_db is None else self.snr_db,
                     seed=self.seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SceneRecord":
        try:
            return cls(**json.loads(line))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ItdError(ErrorKind.INVALID_INPUT, f"bad manifest row: {exc}") from exc


def write_manifest(records: Sequence[SceneRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")
    return path


def read_manifest(path: Union[str, Path]) -> List[SceneRecord]:
    path = Path(path)
    if not path.is_file():
        raise ItdError(ErrorKind.NOT_FOUND, str(path))
    with path.open("r", encoding="utf-8") as fh:
        return [SceneRecord.from_json(line) for line in fh if line.strip()]
#endregion


#region Simulation grids
@dataclass
class SimGrid:
    """rooms x snrs x rt60s x mixture intensities x count scenes. snr None = noiseless."""
    rooms: Tuple[int, ...] = (1, 2, 3)
    snrs: Tuple[Optional[float], ...] = (10.0,)
    rt60s: Tuple[float, ...] = (0.5,)
    count: int = 100
    duration: float = 0.5
    rate: int = DEFAULT_RATE
    mixture_intensities: Optional[Tuple[float, ...]] = None
    integer_delays: bool = False

    def __post_init__(self):
        self.rooms = tuple(int(r) for r in self.rooms)
        self.snrs = tuple(None if s is None else float(s) for s in self.snrs)
        self.rt60s = tuple(float(r) for r in self.rt60s)
        if self.mixture_intensities is not None:
            self.mixture_intensities = tuple(float(i) for i in self.mixture_intensities)
        for room_id in self.rooms:
            room_preset(room_id)
        if self.count < 0 or self.duration <= 0 or self.rate <= 0:
            raise ItdError(ErrorKind.INVALID_INPUT, "count must be >= 0, duration and rate > 0")

    @classmethod
    def from_mapping(cls, mapping: Dict) -> "SimGrid":
        _check_keys(mapping, cls.__dataclass_fields__, "simulation")
        return cls(**mapping)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.rate))

    def cells(self):
        mixtures = self.mixture_intensities if self.mixture_intensities is not None else (None,)
        return list(product(self.rooms, self.snrs, self.rt60s, mixtures))


def _sample_source(rng: np.random.Generator, room: RoomConfig, avoid: Optional[float] = None) -> SourceSpec:
    while True:
        source = SourceSpec(angle=float(rng.uniform(-90.0, 90.0)),
                            distance=float(rng.uniform(0.5, 3.0)))
        if avoid is not None and abs(source.angle - avoid) < 10.0:
            continue
        if _strictly_inside(np.asarray(room.dims, dtype=float), source_position(room, source)):
            return source


def _integer_delay_source(rng: np.random.Generator, room: RoomConfig, rate: int) -> SourceSpec:
    """Source at 3 m whose direct-path tau is a whole number of samples."""
    distance = 3.0

    def lag_error(angle: float, lag: int) -> float:
        return ground_truth_tdoa(room, SourceSpec(angle, distance)) * rate - lag

    # tau grows monotonically with the angle at fixed distance.
    max_lag = int(math.floor(lag_error(90.0, 0) - 1e-9))
    lag = int(rng.integers(-max_lag, max_lag + 1))
    angle = brentq(lag_error, -90.0, 90.0, args=(lag,), xtol=1e-12)
    return SourceSpec(angle=float(angle), distance=distance)


def sample_records(grid: SimGrid, seed: int) -> List[SceneRecord]:
    """Deterministic scene records for every cell of the grid."""
    records = []
    for cell_idx, (room_id, snr, rt60, mixture) in enumerate(grid.cells()):
        room = room_preset(room_id, rt60)
        for k in range(grid.count):
            index = len(records)
            scene_seed = _derive_seed(seed, cell_idx, k)
            rng = _rng(scene_seed)
            if grid.integer_delays:
                sources = [_integer_delay_source(rng, room, grid.rate)]
            else:
                sources = [_sample_source(rng, room)]
            if mixture is not None:
                sources.append(_sample_source(rng, room, avoid=sources[0].angle))
            records.append(SceneRecord(
                clip_id=f"{index:06d}",
                room=room_id,
                sources=[asdict(s) for s in sources],
                snr_db=snr,
                rt60=rt60,
                seed=scene_seed,
                tdoa_ms=1e3 * ground_truth_tdoa(room, sources[0]),
                mixture_intensity=mixture,
            ))
    return records


def render_record(record: SceneRecord, n_samples: int, rate: int = DEFAULT_RATE) -> StereoClip:
    """Render a manifest row with speech-like sources; mixtures are RMS-calibrated."""
    scene = record.scene()
    signals = [speech_like_source(n_samples, rate, seed=_derive_seed(record.seed, 1, i))
               for i in range(len(scene.sources))]

    if record.mixture_intensity is None:
        clip, _ = render_scene(scene, signals)
        return clip

    dry = [render_scene(Scene(scene.room, [source], math.inf, _derive_seed(record.seed, 2, i)), [signal])[0]
           for i, (source, signal) in enumerate(zip(scene.sources, signals))]
    mixed = make_mixture(dry[0], dry[1], record.mixture_intensity)
    if math.isfinite(scene.snr_db):
        mixed = add_noise(mixed, scene.snr_db, seed=_derive_seed(record.seed, 10_000))
    return mixed
#endregion
