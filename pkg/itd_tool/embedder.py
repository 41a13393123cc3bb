"""
Residual convolutional embedder on spectrogram windows, with exact reverse-mode
gradients.

Layout: stem conv (k x k, stride k) -> one residual block per stage
(conv3x3 stride s -> ReLU -> conv3x3 -> add -> ReLU; s = 1 for the first stage,
2 after) -> global average pool -> linear -> l2 normalization. The STFT is
fixed preprocessing; only network weights are learned.
"""
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from itd_tool.audio import MonoClip, stft_batch, window_matrix
from itd_tool.errors import ErrorKind, ItdError

logger = logging.getLogger(__name__)

INPUT_CHANNELS = 2
# Fixed per-channel input scaling (magnitude, phase).
INPUT_SCALE = np.array([1.0 / 16.0, 1.0 / np.pi])
NORM_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"ITDCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Network shape. One residual block per entry in `channels`."""
    channels: Tuple[int, ...] = (8, 16, 32, 32)
    embed_dim: int = 32
    stem_kernel: int = 4

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ItdError(ErrorKind.INVALID_INPUT, "need at least one block with positive channels")
        if self.embed_dim < 2:
            raise ItdError(ErrorKind.INVALID_INPUT, f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.stem_kernel < 1 or 128 % self.stem_kernel != 0:
            raise ItdError(ErrorKind.INVALID_INPUT, f"stem kernel {self.stem_kernel} must divide 128")

    @classmethod
    def desk(cls) -> "ArchConfig":
        return cls()

    @classmethod
    def large(cls) -> "ArchConfig":
        return cls(channels=(64, 128, 256, 512), embed_dim=128)

    @property
    def blocks(self) -> int:
        return len(self.channels)

    def to_dict(self) -> Dict:
        return {"channels": list(self.channels), "embed_dim": self.embed_dim, "stem_kernel": self.stem_kernel}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()


def param_shapes(arch: ArchConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered parameter names and shapes."""
    k = arch.stem_kernel
    first = arch.channels[0]
    shapes = {"stem.w": (first, INPUT_CHANNELS, k, k), "stem.b": (first,)}
    c_in = first
    for i, c_out in enumerate(arch.channels):
        shapes[f"block{i}.a.w"] = (c_out, c_in, 3, 3)
        shapes[f"block{i}.a.b"] = (c_out,)
        shapes[f"block{i}.b.w"] = (c_out, c_out, 3, 3)
        shapes[f"block{i}.b.b"] = (c_out,)
        c_in = c_out
    shapes["proj.w"] = (c_in, arch.embed_dim)
    shapes["proj.b"] = (arch.embed_dim,)
    return shapes


@dataclass
class ModelParams:
    """Named parameter arrays for one ArchConfig."""
    arch: ArchConfig
    arrays: Dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.arch)
        if list(self.arrays) != list(expected):
            missing = sorted(set(expected) ^ set(self.arrays))
            if missing:
                raise ItdError(ErrorKind.SHAPE, f"parameter names differ from arch: {missing}")
            self.arrays = {name: self.arrays[name] for name in expected}
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ItdError(ErrorKind.SHAPE, f"{name} has shape {self.arrays[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.arrays[name])):
                raise ItdError(ErrorKind.NON_FINITE, name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> List[str]:
        return list(self.arrays)

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class EmbeddingSequence:
    """Unit-norm embeddings, one row per window (graph node)."""
    vectors: np.ndarray
    window_step: int
    rate: int

    def __post_init__(self):
        norms = np.linalg.norm(self.vectors, axis=1)
        if self.vectors.ndim != 2 or not np.allclose(norms, 1.0, atol=1e-5):
            raise ItdError(ErrorKind.INVALID_INPUT, "embedding rows must be unit norm")

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class Tape:
    """Intermediates kept by forward for backward."""
    arch: ArchConfig
    caches: Dict[str, tuple] = field(default_factory=dict)


def init_model(arch: ArchConfig, seed: int = 0) -> ModelParams:
    """He-scaled Gaussian weights (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if name == "proj.w" else int(np.prod(shape[1:]))
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return ModelParams(arch, arrays)


#region Layers
def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h_out = (x.shape[2] - k) // stride + 1
    w_out = (x.shape[3] - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(x.shape[0] * h_out * w_out, -1)
    return cols, h_out, w_out


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int):
    k = w.shape[2]
    cols, h_out, w_out = _im2col(x, k, stride, pad)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = out.reshape(x.shape[0], h_out, w_out, w.shape[0]).transpose(0, 3, 1, 2)
    return out, (x, w, stride, pad)


def _conv_backward(d_out: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w, stride, pad = cache
    n, c, h, width = x.shape
    f, _, k, _ = w.shape
    _, _, h_out, w_out = d_out.shape
    cols, _, _ = _im2col(x, k, stride, pad)

    d_flat = d_out.transpose(0, 2, 3, 1).reshape(-1, f)
    d_w = (d_flat.T @ cols).reshape(w.shape)
    d_b = d_flat.sum(axis=0)

    d_cols = (d_flat @ w.reshape(f, -1)).reshape(n, h_out, w_out, c, k, k)
    d_padded = np.zeros((n, c, h + 2 * pad, width + 2 * pad), dtype=d_out.dtype)
    for i in range(k):
        for j in range(k):
            d_padded[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                d_cols[..., i, j].transpose(0, 3, 1, 2)
    return d_padded[:, :, pad:pad + h, pad:pad + width], d_w, d_b


def _check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise ItdError(ErrorKind.NON_FINITE, f"activation after layer '{name}'")
#endregion


def _as_frames(windows: Union[np.ndarray, Sequence[MonoClip]]) -> Tuple[np.ndarray, Optional[int]]:
    if isinstance(windows, np.ndarray):
        return np.atleast_2d(windows), None
    windows = list(windows)
    if not windows:
        raise ItdError(ErrorKind.INVALID_INPUT, "empty window batch")
    lengths = {len(w) for w in windows}
    if len(lengths) != 1:
        raise ItdError(ErrorKind.SHAPE, f"windows differ in length: {sorted(lengths)}")
    return np.stack([w.samples for w in windows]), windows[0].rate


def features(frames: np.ndarray) -> np.ndarray:
    """(N, L) waveforms -> (N, 2, 128, 128) scaled magnitude/phase network input."""
    spec = stft_batch(frames) * INPUT_SCALE
    return np.ascontiguousarray(spec.transpose(0, 3, 1, 2))


def forward(params: ModelParams, windows, step: int = 1, rate: int = 16000) -> Tuple[EmbeddingSequence, Tape]:
    """
    Embed a batch of equal-length windows (MonoClips or an (N, L) array).

    Returns:
        The unit-norm embeddings and the tape for backward.
    """
    frames, clip_rate = _as_frames(windows)
    x = features(frames)
    tape = Tape(params.arch)
    arch = params.arch

    out, tape.caches["stem"] = _conv_forward(x, params["stem.w"], params["stem.b"],
                                             arch.stem_kernel, 0)
    h = np.maximum(out, 0.0)
    tape.caches["stem.relu"] = (out > 0,)
    _check_finite("stem", h)

    for i in range(arch.blocks):
        stride = 1 if i == 0 else 2
        pre_a, tape.caches[f"block{i}.a"] = _conv_forward(h, params[f"block{i}.a.w"], params[f"block{i}.a.b"],
                                                          stride, 1)
        a = np.maximum(pre_a, 0.0)
        pre_b, tape.caches[f"block{i}.b"] = _conv_forward(a, params[f"block{i}.b.w"], params[f"block{i}.b.b"],
                                                          1, 1)
        summed = a + pre_b
        h = np.maximum(summed, 0.0)
        tape.caches[f"block{i}.relu"] = (pre_a > 0, summed > 0)
        _check_finite(f"block{i}", h)

    pooled = h.mean(axis=(2, 3))
    z = pooled @ params["proj.w"] + params["proj.b"]
    _check_finite("proj", z)
    norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), NORM_FLOOR)
    unit = z / norm
    tape.caches["pool"] = (h.shape,)
    tape.caches["proj"] = (pooled, params["proj.w"])
    tape.caches["norm"] = (unit, norm)

    return EmbeddingSequence(unit, step, clip_rate or rate), tape


def backward(tape: Tape, grad_embeddings: np.ndarray) -> Dict[str, np.ndarray]:
    """Exact gradients of sum(grad_embeddings * embeddings) w.r.t. every parameter."""
    unit, norm = tape.caches["norm"]
    if grad_embeddings.shape != unit.shape:
        raise ItdError(ErrorKind.SHAPE, f"gradient shape {grad_embeddings.shape} != embeddings {unit.shape}")
    arch = tape.arch
    grads: Dict[str, np.ndarray] = {}

    d_z = (grad_embeddings - unit * np.sum(unit * grad_embeddings, axis=1, keepdims=True)) / norm
    pooled, proj_w = tape.caches["proj"]
    grads["proj.w"] = pooled.T @ d_z
    grads["proj.b"] = d_z.sum(axis=0)
    d_pooled = d_z @ proj_w.T

    (shape,) = tape.caches["pool"]
    d_h = np.broadcast_to(d_pooled[:, :, None, None] / (shape[2] * shape[3]), shape)

    for i in reversed(range(arch.blocks)):
        mask_a, mask_sum = tape.caches[f"block{i}.relu"]
        d_sum = d_h * mask_sum
        d_a, grads[f"block{i}.b.w"], grads[f"block{i}.b.b"] = _conv_backward(d_sum, tape.caches[f"block{i}.b"])
        d_a = (d_a + d_sum) * mask_a
        d_h, grads[f"block{i}.a.w"], grads[f"block{i}.a.b"] = _conv_backward(d_a, tape.caches[f"block{i}.a"])

    (mask,) = tape.caches["stem.relu"]
    _, grads["stem.w"], grads["stem.b"] = _conv_backward(d_h * mask, tape.caches["stem"])
    return {name: grads[name] for name in param_shapes(arch)}


def embed_frames(params: ModelParams, frames: np.ndarray, step: int, rate: int,
                 chunk: int = 256) -> EmbeddingSequence:
    """Forward in chunks without keeping tapes."""
    parts = [forward(params, frames[i:i + chunk], step, rate)[0].vectors
             for i in range(0, frames.shape[0], chunk)]
    return EmbeddingSequence(np.concatenate(parts), step, rate)


def embed_sequence(params: ModelParams, channel: MonoClip, window: int, step: int) -> EmbeddingSequence:
    """Sliding-window embeddings of one channel, floor((n - window) / step) rows."""
    frames = window_matrix(channel.samples, window, step)
    if frames.shape[0] == 0:
        raise ItdError(ErrorKind.INVALID_INPUT,
                       f"channel of {len(channel)} samples holds no window of {window} at step {step}")
    return embed_frames(params, frames, step, channel.rate)


#region Checkpoints
def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> Path:
    """
    Binary layout, little-endian:
    magic(8) version(u16) digest(32) arch_len(u32) arch_json count(u32)
    then per array: name_len(u16) name ndim(u8) dims(u32 * ndim) float64 data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch_json = json.dumps(params.arch.to_dict(), sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(bytes.fromhex(params.arch.digest()))
        fh.write(struct.pack("<I", len(arch_json)))
        fh.write(arch_json)
        fh.write(struct.pack("<I", len(params.arrays)))
        for name, array in params.arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return path


def _read(fh, size: int) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise ItdError(ErrorKind.CHECKPOINT, "truncated checkpoint")
    return data


def _arch_diff(expected: ArchConfig, found: ArchConfig) -> str:
    a, b = expected.to_dict(), found.to_dict()
    return ", ".join(f"{k}: expected {a[k]} found {b[k]}" for k in a if a[k] != b[k])


def load_checkpoint(path: Union[str, Path], arch: Optional[ArchConfig] = None) -> ModelParams:
    """Read a checkpoint; with `arch` given, refuse one written for another architecture."""
    path = Path(path)
    if not path.is_file():
        raise ItdError(ErrorKind.NOT_FOUND, str(path))
    with path.open("rb") as fh:
        if _read(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ItdError(ErrorKind.CHECKPOINT, f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<H", _read(fh, 2))
        if version != CHECKPOINT_VERSION:
            raise ItdError(ErrorKind.CHECKPOINT, f"version {version}, expected {CHECKPOINT_VERSION}")
        digest = _read(fh, 32).hex()
        (arch_len,) = struct.unpack("<I", _read(fh, 4))
        try:
            stored = json.loads(_read(fh, arch_len).decode("utf-8"))
            found = ArchConfig(channels=tuple(stored["channels"]), embed_dim=stored["embed_dim"],
                               stem_kernel=stored["stem_kernel"])
        except (ValueError, KeyError) as exc:
            raise ItdError(ErrorKind.CHECKPOINT, f"unreadable arch record: {exc}") from exc
        if found.digest() != digest:
            raise ItdError(ErrorKind.CHECKPOINT, "arch digest does not match its record")
        if arch is not None and arch.digest() != digest:
            raise ItdError(ErrorKind.CHECKPOINT, f"arch digest differs ({_arch_diff(arch, found)})")

        (count,) = struct.unpack("<I", _read(fh, 4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return ModelParams(found, arrays)
#endregion
