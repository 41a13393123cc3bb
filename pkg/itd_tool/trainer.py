"""Self-supervised training loop: AdamW, cosine decay, held-out early stopping."""
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from itd_tool.acoustics import SimGrid, read_manifest, render_record, sample_records
from itd_tool.audio import DEFAULT_RATE, MonoClip, StereoClip, load_wav, resample, window_matrix
from itd_tool.augment import AugmentConfig, Side, pipeline
from itd_tool.embedder import ArchConfig, ModelParams, backward, forward, init_model, save_checkpoint
from itd_tool.errors import ErrorKind, ItdError
from itd_tool.estimator import estimate_delay
from itd_tool.losses import LossResult, affinity, crw_loss, monoclr_loss, zero_loss
from itd_tool.utils import _check_keys, _derive_seed

logger = logging.getLogger(__name__)

LOSSES = ("crw", "zero", "monoclr")
METRIC_COLUMNS = ("step", "loss", "lr", "heldout_mae_ms")
MANIFEST_NAME = "manifest.jsonl"
SILENT_RETRIES = 8


def _arch_from(value) -> ArchConfig:
    if isinstance(value, ArchConfig):
        return value
    if value == "desk":
        return ArchConfig.desk()
    if value == "large":
        return ArchConfig.large()
    if isinstance(value, dict):
        _check_keys(value, ArchConfig.__dataclass_fields__, "arch")
        return ArchConfig(**value)
    raise ItdError(ErrorKind.INVALID_INPUT, f"arch must be 'desk', 'large' or a mapping, got {value!r}")


@dataclass
class TrainConfig:
    """Training hyper-parameters. Lengths are in samples; patience counts evaluations."""
    loss: str = "crw"
    lr: float = 1e-4
    batch: int = 8
    temperature: float = 0.05
    window: int = 1024
    step: int = 4
    clip_len: int = 1220
    max_steps: int = 20000
    patience: int = 5
    eval_interval: int = 500
    weight_decay: float = 0.01
    augment: AugmentConfig = field(default_factory=AugmentConfig.regular)
    seed: int = 0
    heldout: int = 30
    heldout_step: int = 1
    heldout_snr_db: Optional[float] = 10.0
    heldout_rt60: float = 0.1
    pretrain_window: int = 7680
    pretrain_steps: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig.desk)

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ItdError(ErrorKind.INVALID_INPUT, f"loss must be one of {LOSSES}, got '{self.loss}'")
        sizes = (self.batch, self.window, self.step, self.clip_len, self.max_steps, self.patience,
                 self.eval_interval, self.heldout, self.heldout_step, self.pretrain_window)
        if min(sizes) < 1 or self.lr < 0 or self.weight_decay < 0 or self.temperature <= 0:
            raise ItdError(ErrorKind.INVALID_INPUT, "training sizes must be >= 1, rates >= 0")
        if self.clip_len < self.window + 2 * self.step:
            raise ItdError(ErrorKind.INVALID_INPUT,
                           f"clip_len {self.clip_len} leaves fewer than two windows of {self.window}")
        if self.pretrain_steps < 0:
            raise ItdError(ErrorKind.INVALID_INPUT, "pretrain_steps must be >= 0")
        if self.loss == "monoclr" and self.augment.shift_bound < self.step:
            raise ItdError(ErrorKind.INVALID_INPUT,
                           f"monoclr needs time shifts of at least one window step ({self.step} samples)")

    @classmethod
    def from_mapping(cls, mapping: Dict) -> "TrainConfig":
        _check_keys(mapping, cls.__dataclass_fields__, "train")
        values = dict(mapping)
        if "augment" in values and not isinstance(values["augment"], AugmentConfig):
            values["augment"] = AugmentConfig.from_mapping(values["augment"] or {})
        if "arch" in values:
            values["arch"] = _arch_from(values["arch"])
        return cls(**values)


@dataclass
class OptState:
    """AdamW moments, one pair per parameter array."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})


def adamw_step(params: ModelParams, grads: Dict[str, np.ndarray], state: OptState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> Tuple[ModelParams, OptState]:
    """
    One AdamW update with decoupled weight decay (params shrink by 1 - lr * wd
    before the moment step). A non-finite gradient skips the whole step.
    """
    for name, array in params.arrays.items():
        if name not in grads or grads[name].shape != array.shape:
            raise ItdError(ErrorKind.SHAPE, f"gradient for {name} missing or misshaped")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        logger.warning("non-finite gradient at step %d, update skipped", state.step + 1)
        return params, replace(state, skipped=state.skipped + 1)

    step = state.step + 1
    arrays, m, v = {}, {}, {}
    for name, p in params.arrays.items():
        g = grads[name]
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1 ** step)
        v_hat = v[name] / (1.0 - beta2 ** step)
        arrays[name] = p * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ModelParams(params.arch, arrays), OptState(m, v, step, state.skipped)


def cosine_lr(step: int, total: int, base: float) -> float:
    """base * (1 + cos(pi * step / total)) / 2, held at 0 past total."""
    if total <= 0:
        raise ItdError(ErrorKind.INVALID_INPUT, "total steps must be positive")
    return base * (1.0 + math.cos(math.pi * min(step, total) / total)) / 2.0


#region Corpus
def _corpus_from_manifest(path: Path, n_samples: int) -> List[StereoClip]:
    clips = []
    for record in read_manifest(path):
        wav = path.parent / record.wav if record.wav else None
        if wav is not None and wav.is_file():
            clips.append(load_wav(wav))
        else:
            clips.append(render_record(record, n_samples))
    return clips


def load_corpus(path: Union[str, Path], min_len: int, rate: int = DEFAULT_RATE,
                render_samples: int = 8000) -> List[StereoClip]:
    """
    Stereo training clips from a scene manifest (.jsonl), a directory holding
    one, or a directory of WAV files. Mono, silent and too-short files are skipped.
    """
    path = Path(path)
    if path.is_dir() and (path / MANIFEST_NAME).is_file():
        path = path / MANIFEST_NAME
    if path.is_file():
        loaded = _corpus_from_manifest(path, render_samples)
    elif path.is_dir():
        loaded = [load_wav(p) for p in sorted(path.glob("*.wav"))]
    else:
        raise ItdError(ErrorKind.NOT_FOUND, str(path))

    clips = []
    for clip in loaded:
        if not isinstance(clip, StereoClip):
            logger.warning("skipping a mono clip in a stereo corpus")
            continue
        if clip.rate != rate:
            clip = resample(clip, rate)
        if len(clip) < min_len:
            logger.warning("skipping a clip of %d samples, need %d", len(clip), min_len)
            continue
        if not np.any(clip.as_array()):
            logger.warning("skipping a silent clip")
            continue
        clips.append(clip)
    if not clips:
        raise ItdError(ErrorKind.INVALID_INPUT, f"corpus {path} holds no usable stereo clip")
    logger.info("loaded %d training clips from %s", len(clips), path)
    return clips


def heldout_set(config: TrainConfig) -> List[Tuple[StereoClip, float]]:
    """Simulated clips of clip_len samples with their true delays in seconds."""
    per_room = max(1, -(-config.heldout // 3))
    grid = SimGrid(snrs=(config.heldout_snr_db,), rt60s=(config.heldout_rt60,), count=per_room,
                   duration=config.clip_len / DEFAULT_RATE)
    records = sample_records(grid, _derive_seed(config.seed, 7))[:config.heldout]
    return [(render_record(r, config.clip_len), r.tdoa_ms / 1e3) for r in records]


def heldout_mae_ms(params: ModelParams, cases: Sequence[Tuple[StereoClip, float]], config: TrainConfig) -> float:
    errors = [abs(estimate_delay(params, clip, config.window, config.heldout_step,
                                 temperature=config.temperature).delay_s - truth)
              for clip, truth in cases]
    return 1e3 * float(np.mean(errors))
#endregion


@dataclass
class TrainResult:
    params: ModelParams
    best_step: int
    best_mae_ms: float
    initial_mae_ms: float
    steps_run: int
    stopped_early: bool
    metrics_path: Path
    checkpoint_path: Path


class _BatchLoss:
    """Loss and embedding gradients for one batch of paired window stacks."""

    def __init__(self, config: TrainConfig):
        self.config = config

    def __call__(self, embeddings: np.ndarray, spans: List[Tuple[slice, slice, int]]) -> Tuple[float, np.ndarray]:
        grad = np.zeros_like(embeddings)
        total = 0.0
        c = self.config.temperature
        for first, second, shift in spans:
            h1, h2 = embeddings[first], embeddings[second]
            if self.config.loss == "crw":
                result: LossResult = crw_loss(affinity(h1, h2, c), affinity(h2, h1, c))
            elif self.config.loss == "zero":
                result = zero_loss(affinity(h1, h2, c))
            else:
                result = monoclr_loss(h1, h2, shift, self.config.step, c)
            total += result.value
            grad[first] += result.grads[0]
            grad[second] += result.grads[1]
        return total / len(spans), grad / len(spans)


def _crop(clip: StereoClip, length: int, rng: np.random.Generator) -> StereoClip:
    start = int(rng.integers(0, len(clip) - length + 1))
    return clip.with_array(clip.as_array()[:, start:start + length])


def _pair(clip: StereoClip, config: TrainConfig, seed: int,
          pool: Sequence[MonoClip]) -> Tuple[MonoClip, MonoClip, int]:
    """The two inputs the loss compares, plus the shift that relates them."""
    augment = config.augment
    if config.loss == "monoclr":
        mono = clip.left
        view, record = pipeline(mono, augment, Side.VIEW, seed, pool, shift_multiple=config.step)
        return mono, view, record.shift_samples

    stereo, _ = pipeline(clip, augment.only("swap", "scale"), Side.CLEAN, _derive_seed(seed, 0))
    right, _ = pipeline(stereo.right, augment.only("noise", "reverb", "mixture"), Side.AUGMENTED,
                        _derive_seed(seed, 1), pool)
    return stereo.left, right, 0


class _MetricsLog:
    """Append-only metrics CSV. Each row is flushed as soon as it is written."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = path.open("w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_COLUMNS)
        self._writer.writeheader()
        self._fh.flush()

    def append(self, row: Dict) -> None:
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "_MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _draw_pair(clips: Sequence[StereoClip], length: int, config: TrainConfig, rng: np.random.Generator,
               pool: Sequence[MonoClip]) -> Optional[Tuple[MonoClip, MonoClip, int]]:
    """A training pair from a random crop, redrawn while augmentation hits a silent crop."""
    for _ in range(SILENT_RETRIES):
        clip = _crop(clips[int(rng.integers(0, len(clips)))], length, rng)
        try:
            return _pair(clip, config, int(rng.integers(0, 2 ** 32)), pool)
        except ItdError as err:
            if err.kind is not ErrorKind.SILENT:
                raise
            logger.debug("redrawing a silent crop: %s", err)
    return None


def train(config: TrainConfig, corpus: Union[str, Path, Sequence[StereoClip]],
          out_dir: Union[str, Path]) -> TrainResult:
    """
    Run the configured self-supervised objective until max_steps or until the
    held-out MAE has not improved for `patience` evaluations.

    Writes metrics.csv, last.ckpt and best.ckpt to out_dir; returns the best
    parameters, not the last.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pretrain_len = config.pretrain_window + config.clip_len - config.window
    min_len = pretrain_len if config.pretrain_steps else config.clip_len
    clips = list(corpus) if not isinstance(corpus, (str, Path)) else load_corpus(corpus, min_len)
    if not clips:
        raise ItdError(ErrorKind.INVALID_INPUT, "empty training corpus")
    pool = [clip.left for clip in clips]

    rng = np.random.default_rng(_derive_seed(config.seed, 1))
    params = init_model(config.arch, config.seed)
    state = OptState.zeros(params)
    batch_loss = _BatchLoss(config)
    cases = heldout_set(config)

    metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "best.ckpt"
    initial_mae = heldout_mae_ms(params, cases, config)
    best_params, best_mae, best_step, stale = params, initial_mae, 0, 0
    save_checkpoint(params, best_path)
    logger.info("untrained held-out MAE %.4f ms", initial_mae)

    step, stopped_early = 0, False
    with _MetricsLog(metrics_path) as metrics:
        metrics.append({"step": 0, "loss": "", "lr": config.lr, "heldout_mae_ms": initial_mae})
        while step < config.max_steps:
            step += 1
            pretraining = step <= config.pretrain_steps
            window = config.pretrain_window if pretraining else config.window
            length = pretrain_len if pretraining else config.clip_len
            lr = cosine_lr(step - 1, config.max_steps, config.lr)

            frames, spans, offset = [], [], 0
            for _ in range(config.batch):
                pair = _draw_pair(clips, length, config, rng, pool)
                if pair is None:
                    logger.warning("step %d: dropping a batch item, every crop drawn was silent", step)
                    continue
                first, second, shift = pair
                rows_a = window_matrix(first.samples, window, config.step)
                rows_b = window_matrix(second.samples, window, config.step)
                frames.extend([rows_a, rows_b])
                n = rows_a.shape[0]
                spans.append((slice(offset, offset + n), slice(offset + n, offset + 2 * n), shift))
                offset += 2 * n

            row = {"step": step, "loss": "", "lr": lr, "heldout_mae_ms": ""}
            if spans:
                embeddings, tape = forward(params, np.concatenate(frames), config.step)
                loss, grad = batch_loss(embeddings.vectors, spans)
                if not math.isfinite(loss):
                    save_checkpoint(params, out_dir / "abort.ckpt")
                    raise ItdError(ErrorKind.NON_FINITE,
                                   f"loss at step {step} (lr {lr:.3g}); last parameters saved to abort.ckpt")
                params, state = adamw_step(params, backward(tape, grad), state, lr,
                                           weight_decay=config.weight_decay)
                row["loss"] = loss
            else:
                logger.warning("step %d: no usable crop, parameters left unchanged", step)

            if step % config.eval_interval == 0 or step == config.max_steps:
                mae = heldout_mae_ms(params, cases, config)
                row["heldout_mae_ms"] = mae
                save_checkpoint(params, out_dir / "last.ckpt")
                logger.info("step %d held-out MAE %.4f ms", step, mae)
                if mae < best_mae:
                    best_params, best_mae, best_step, stale = params, mae, step, 0
                    save_checkpoint(params, best_path)
                elif not pretraining:
                    stale += 1
            metrics.append(row)
            if stale >= config.patience:
                stopped_early = True
                logger.info("early stop at step %d, best step %d", step, best_step)
                break

    return TrainResult(best_params, best_step, best_mae, initial_mae, step, stopped_early,
                       metrics_path, best_path)
