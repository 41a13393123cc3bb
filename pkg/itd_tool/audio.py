"""Waveform containers, WAV I/O, resampling, windowing and STFT features."""
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Union

import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window, resample_poly

from itd_tool.errors import ErrorKind, ItdError

logger = logging.getLogger(__name__)

DEFAULT_RATE = 16000
N_FFT = 256
N_BINS = 128
N_FRAMES = 128
# One-sided power sum of a real frame is about half of N_FFT times its energy.
PARSEVAL_SCALE = N_FFT / 2
_HANN = get_window("hann", N_FFT)
_SUBTYPES = {"PCM_16", "FLOAT"}


@dataclass
class MonoClip:
    """One channel of audio at a fixed rate."""
    samples: np.ndarray
    rate: int = DEFAULT_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ItdError(ErrorKind.SHAPE, f"mono samples must be 1-D, got {self.samples.shape}")
        if self.rate <= 0:
            raise ItdError(ErrorKind.INVALID_INPUT, f"rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ItdError(ErrorKind.NON_FINITE, "audio samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def as_array(self) -> np.ndarray:
        return self.samples

    def with_array(self, samples: np.ndarray) -> "MonoClip":
        return MonoClip(samples, self.rate)


@dataclass
class StereoClip:
    """Two aligned channels. Index 0 is left, 1 is right."""
    left: MonoClip
    right: MonoClip

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise ItdError(ErrorKind.SHAPE,
                           f"channel lengths differ: {len(self.left)} vs {len(self.right)}")
        if self.left.rate != self.right.rate:
            raise ItdError(ErrorKind.INVALID_INPUT,
                           f"channel rates differ: {self.left.rate} vs {self.right.rate}")

    @classmethod
    def from_array(cls, samples: np.ndarray, rate: int = DEFAULT_RATE) -> "StereoClip":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] != 2:
            raise ItdError(ErrorKind.SHAPE, f"stereo samples must be (2, n), got {samples.shape}")
        return cls(MonoClip(samples[0], rate), MonoClip(samples[1], rate))

    @property
    def rate(self) -> int:
        return self.left.rate

    def __len__(self) -> int:
        return len(self.left)

    def as_array(self) -> np.ndarray:
        return np.stack([self.left.samples, self.right.samples])

    def with_array(self, samples: np.ndarray) -> "StereoClip":
        return StereoClip.from_array(samples, self.rate)


Clip = Union[MonoClip, StereoClip]


@dataclass
class Spectrogram:
    """Magnitude and phase image, axes [frequency, time, component]."""
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (N_BINS, N_FRAMES, 2):
            raise ItdError(ErrorKind.SHAPE, f"spectrogram must be 128x128x2, got {self.values.shape}")

    @property
    def magnitude(self) -> np.ndarray:
        return self.values[..., 0]

    @property
    def phase(self) -> np.ndarray:
        return self.values[..., 1]


def load_wav(path: Union[str, Path]) -> Clip:
    """
    Read a PCM-16 or float-32 WAV file.

    Returns:
        MonoClip for 1-channel files, StereoClip for 2-channel files.
    """
    path = Path(path)
    if not path.is_file():
        raise ItdError(ErrorKind.NOT_FOUND, str(path))
    try:
        info = sf.info(str(path))
        if info.format != "WAV" or info.subtype not in _SUBTYPES:
            raise ItdError(ErrorKind.UNSUPPORTED, f"{path} ({info.format}/{info.subtype})")
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except RuntimeError as exc:  # libsndfile errors
        raise ItdError(ErrorKind.UNSUPPORTED, f"{path}: {exc}") from exc

    if data.shape[0] == 0:
        raise ItdError(ErrorKind.INVALID_INPUT, f"{path} holds zero-length audio")
    if data.shape[1] not in (1, 2):
        raise ItdError(ErrorKind.UNSUPPORTED, f"{path} has {data.shape[1]} channels")

    peak = float(np.max(np.abs(data)))
    if peak > 1.0:
        logger.warning("%s peaks at %.3f, rescaling to [-1, 1]", path, peak)
        data = data / peak

    if data.shape[1] == 1:
        return MonoClip(data[:, 0], int(rate))
    return StereoClip.from_array(data.T, int(rate))


def save_wav(clip: Clip, path: Union[str, Path], subtype: str = "PCM_16") -> Path:
    """Write a clip as WAV. PCM_16 values outside [-1, 1) are clipped by libsndfile."""
    if subtype not in _SUBTYPES:
        raise ItdError(ErrorKind.UNSUPPORTED, subtype)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = clip.as_array()
    if data.ndim == 2:
        data = data.T
    sf.write(str(path), data, clip.rate, subtype=subtype, format="WAV")
    return path


def resample(clip: Clip, target_rate: int) -> Clip:
    """Band-limited polyphase (Kaiser windowed-sinc) resampling to target_rate."""
    if target_rate <= 0:
        raise ItdError(ErrorKind.INVALID_INPUT, f"target rate must be positive, got {target_rate}")
    if target_rate == clip.rate:
        return clip.with_array(clip.as_array().copy())

    ratio = Fraction(int(target_rate), int(clip.rate))
    n_out = int(round(len(clip) * target_rate / clip.rate))
    data = resample_poly(clip.as_array(), ratio.numerator, ratio.denominator, axis=-1)
    if data.shape[-1] >= n_out:
        data = data[..., :n_out]
    else:
        pad = [(0, 0)] * (data.ndim - 1) + [(0, n_out - data.shape[-1])]
        data = np.pad(data, pad)

    if isinstance(clip, StereoClip):
        return StereoClip.from_array(data, int(target_rate))
    return MonoClip(data, int(target_rate))


def window_count(n: int, window: int, step: int) -> int:
    return (n - window) // step


def window_matrix(samples: np.ndarray, window: int, step: int) -> np.ndarray:
    """Read-only (count, window) view; row k is samples[k*step : k*step + window]."""
    n = samples.shape[-1]
    if step < 1:
        raise ItdError(ErrorKind.INVALID_INPUT, f"step must be >= 1, got {step}")
    if window > n:
        raise ItdError(ErrorKind.INVALID_INPUT, f"window {window} is longer than clip ({n})")
    count = window_count(n, window, step)
    return sliding_window_view(samples, window)[: count * step : step]


def extract_windows(clip: MonoClip, window: int, step: int) -> List[MonoClip]:
    """Sliding windows; the k-th window covers [k*step, k*step + window)."""
    rows = window_matrix(clip.samples, window, step)
    return [MonoClip(row.copy(), clip.rate) for row in rows]


def stft_batch(frames: np.ndarray) -> np.ndarray:
    """
    Spectrogram features of a batch of equal-length waveforms.

    Args:
        frames: (N, L) array, L >= 256.

    Returns:
        (N, 128, 128, 2) array: [batch, frequency, time, (magnitude, phase)].
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ItdError(ErrorKind.SHAPE, f"expected (N, L) frames, got {frames.shape}")
    length = frames.shape[1]
    if length < N_FFT:
        raise ItdError(ErrorKind.INVALID_INPUT, f"window of {length} samples is shorter than {N_FFT}")

    hop = length // N_FRAMES
    half = N_FFT // 2
    padded = np.pad(frames, ((0, 0), (half, half)), mode="reflect")
    segments = sliding_window_view(padded, N_FFT, axis=1)[:, ::hop][:, :N_FRAMES]
    spectrum = np.fft.rfft(segments * _HANN, axis=-1)[..., :N_BINS]  # drop Nyquist

    spectrum = np.swapaxes(spectrum, 1, 2)  # -> [batch, frequency, time]
    phase = np.angle(spectrum)
    phase[phase <= -np.pi] = np.pi
    return np.stack([np.abs(spectrum), phase], axis=-1)


def stft_features(window: MonoClip) -> Spectrogram:
    """Centered Hann STFT, FFT size 256, hop floor(L/128), 128 bins x 128 frames."""
    return Spectrogram(stft_batch(window.samples[np.newaxis, :])[0])
