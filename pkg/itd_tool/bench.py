"""Dataset generation, evaluation reports and robustness sweeps."""
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from itd_tool.acoustics import SceneRecord, SimGrid, read_manifest, render_record, room_preset, \
    sample_records, write_manifest
from itd_tool.audio import DEFAULT_RATE, StereoClip, load_wav, resample, save_wav
from itd_tool.embedder import ModelParams
from itd_tool.errors import ErrorKind, ItdError
from itd_tool.estimator import Direction, EstimatorConfig, default_max_lag, estimate_delay, iid_direction
from itd_tool.gcc import classic_estimate
from itd_tool.utils import _check_keys, _derive_seed, _rng

logger = logging.getLogger(__name__)

METHODS = ("gcc", "model", "iid", "random")
SWEEP_AXES = ("snr", "rt60", "mixture", "votes", "duration")
SCHEMA_VERSION = 1
EVAL_COLUMNS = ("clip_id", "truth_ms", "pred_ms", "abs_err_ms")
SWEEP_COLUMNS = ("axis", "value", "method", "mae_ms", "rmse_ms", "lr_accuracy", "n")
MANIFEST_NAME = "manifest.jsonl"


@dataclass
class EvalCase:
    clip_id: str
    clip: StereoClip
    truth_ms: float
    mic_spacing: Optional[float] = None


@dataclass
class EvalRow:
    clip_id: str
    truth_ms: float
    pred_ms: float

    @property
    def abs_err_ms(self) -> float:
        return abs(self.pred_ms - self.truth_ms)


@dataclass
class EvalReport:
    """Per-clip predictions of one method; LR accuracy ignores truths under one sample."""
    method: str
    rows: List[EvalRow] = field(default_factory=list)
    rate: int = DEFAULT_RATE

    @property
    def summary(self) -> Dict[str, float]:
        if not self.rows:
            return {"mae_ms": math.nan, "rmse_ms": math.nan, "lr_accuracy": math.nan, "n": 0}
        errors = np.array([row.abs_err_ms for row in self.rows])
        dead_zone = 1e3 / self.rate
        sided = [row for row in self.rows if abs(row.truth_ms) >= dead_zone]
        hits = [np.sign(row.pred_ms) == np.sign(row.truth_ms) for row in sided]
        return {
            "mae_ms": float(np.mean(errors)),
            "rmse_ms": float(np.sqrt(np.mean(errors ** 2))),
            "lr_accuracy": float(np.mean(hits)) if hits else math.nan,
            "n": len(self.rows),
        }

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Per-clip rows, then a '#'-prefixed summary footer."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            fh.write(f"# itd-tool eval v{SCHEMA_VERSION} method={self.method}\n")
            writer = csv.writer(fh)
            writer.writerow(EVAL_COLUMNS)
            for row in self.rows:
                writer.writerow([row.clip_id, repr(row.truth_ms), repr(row.pred_ms), repr(row.abs_err_ms)])
            for key, value in self.summary.items():
                fh.write(f"# {key},{value}\n")
        return path


#region Datasets
def gen_dataset(grid: SimGrid, out_dir: Union[str, Path], seed: int = 0) -> Path:
    """Render every scene of the grid to wav/<clip_id>.wav and write manifest.jsonl."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ItdError(ErrorKind.FAILED, f"cannot create {out_dir}: {exc}") from exc

    records = []
    for record in sample_records(grid, seed):
        relative = f"wav/{record.clip_id}.wav"
        save_wav(render_record(record, grid.n_samples, grid.rate), out_dir / relative, subtype="FLOAT")
        records.append(replace(record, wav=relative))
    logger.info("wrote %d scenes to %s", len(records), out_dir)
    return write_manifest(records, out_dir / MANIFEST_NAME)


def _case(record: SceneRecord, clip: StereoClip) -> EvalCase:
    return EvalCase(record.clip_id, clip, record.tdoa_ms, room_preset(record.room).mic_spacing)


def load_cases(manifest: Union[str, Path], rate: int = DEFAULT_RATE, render_samples: int = 8000) -> List[EvalCase]:
    """Cases of a manifest; rows without a WAV on disk are rendered on the fly."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    cases = []
    for record in read_manifest(manifest):
        wav = manifest.parent / record.wav if record.wav else None
        if wav is not None and wav.is_file():
            clip = load_wav(wav)
            if not isinstance(clip, StereoClip):
                raise ItdError(ErrorKind.UNSUPPORTED, f"{wav} is not stereo")
            clip = resample(clip, rate)
        else:
            clip = render_record(record, render_samples, rate)
        cases.append(_case(record, clip))
    return cases


def simulated_cases(grid: SimGrid, seed: int) -> List[EvalCase]:
    return [_case(r, render_record(r, grid.n_samples, grid.rate)) for r in sample_records(grid, seed)]
#endregion


def center_crop(clip: StereoClip, length: int) -> StereoClip:
    """The middle `length` samples; shorter clips come back unchanged."""
    if len(clip) <= length:
        return clip
    start = (len(clip) - length) // 2
    return clip.with_array(clip.as_array()[:, start:start + length])


def _max_lag(config: EstimatorConfig, case: EvalCase, rate: int) -> int:
    if config.max_delay_samples is not None:
        return config.max_delay_samples
    return default_max_lag(case.mic_spacing, rate)


def _predict_ms(method: str, case: EvalCase, config: EstimatorConfig, params: Optional[ModelParams],
                rng: np.random.Generator) -> float:
    clip = center_crop(case.clip, config.input_len)
    rate = clip.rate
    max_lag = _max_lag(config, case, rate)
    if method == "gcc":
        votes = min(config.votes, len(clip) - config.window + 1)
        return classic_estimate(clip, votes, config.window, config.agg, max_lag,
                                config.inlier_threshold).delay_ms
    if method == "model":
        return estimate_delay(params, clip, config.window, config.step, config.agg, config.vote_mode,
                              max_lag / rate, config.temperature, config.inlier_threshold).delay_ms
    if method == "iid":
        sign = 1.0 if iid_direction(clip) is Direction.RIGHT else -1.0
        return sign * 1e3 * max_lag / rate
    if method == "random":
        return 1e3 * float(rng.uniform(-max_lag, max_lag)) / rate
    raise ItdError(ErrorKind.INVALID_INPUT, f"method must be one of {METHODS}, got '{method}'")


def evaluate(method: str, cases: Sequence[EvalCase], config: Optional[EstimatorConfig] = None,
             params: Optional[ModelParams] = None, seed: int = 0) -> EvalReport:
    """
    Run one method on every case. "model" needs params; "random" draws uniform
    delays within the max delay; "iid" answers the max delay on the louder side.
    """
    config = config or EstimatorConfig()
    if method not in METHODS:
        raise ItdError(ErrorKind.INVALID_INPUT, f"method must be one of {METHODS}, got '{method}'")
    if method == "model" and params is None:
        raise ItdError(ErrorKind.INVALID_INPUT, "the model method needs a checkpoint")
    rng = _rng(_derive_seed(seed, 3))
    report = EvalReport(method, rate=cases[0].clip.rate if cases else DEFAULT_RATE)
    for case in sorted(cases, key=lambda c: c.clip_id):
        report.rows.append(EvalRow(case.clip_id, case.truth_ms, _predict_ms(method, case, config, params, rng)))
    return report


#region Sweeps
_DEFAULT_VALUES: Dict[str, Tuple[float, ...]] = {
    "snr": (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0),
    "rt60": (0.1, 0.3, 0.5, 0.7, 0.9),
    "mixture": (0.1, 0.3, 0.5, 0.7, 0.9),
    "votes": (1, 32, 128, 256, 512),
    "duration": (1.25, 2.0, 4.0, 8.0),
}


@dataclass
class SweepConfig:
    """
    One robustness sweep. Off-axis conditions: snr at rt60 0.1; rt60 at snr 30;
    mixture at snr 30, rt60 0.1 and 0.5 s inputs; votes and duration at snr 10,
    rt60 0.5. Duration values are multiples of the window.
    """
    axis: str = "snr"
    values: Optional[Tuple[float, ...]] = None
    methods: Tuple[str, ...] = ("gcc",)
    count: int = 100
    rooms: Tuple[int, ...] = (1, 2, 3)
    seed: int = 0
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ItdError(ErrorKind.INVALID_INPUT, f"unknown sweep axis '{self.axis}', expected one of {SWEEP_AXES}")
        self.values = tuple(_DEFAULT_VALUES[self.axis] if self.values is None else self.values)
        self.methods = tuple(self.methods)
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise ItdError(ErrorKind.INVALID_INPUT, f"unknown methods {sorted(unknown)}")

    @classmethod
    def from_mapping(cls, mapping: Dict) -> "SweepConfig":
        _check_keys(mapping, cls.__dataclass_fields__, "sweep")
        values = dict(mapping)
        if "estimator" in values and not isinstance(values["estimator"], EstimatorConfig):
            values["estimator"] = EstimatorConfig.from_mapping(values["estimator"] or {})
        return cls(**values)

    def condition(self, value: float) -> Tuple[SimGrid, EstimatorConfig]:
        """Simulation grid and estimator settings for one value of the axis."""
        est = self.estimator
        base = SimGrid(rooms=self.rooms, count=self.count, snrs=(10.0,), rt60s=(0.5,),
                       duration=est.input_len / DEFAULT_RATE)
        if self.axis == "snr":
            return replace(base, snrs=(float(value),), rt60s=(0.1,)), est
        if self.axis == "rt60":
            return replace(base, snrs=(30.0,), rt60s=(float(value),)), est
        if self.axis == "mixture":
            est = replace(est, input_len=DEFAULT_RATE // 2)
            return replace(base, snrs=(30.0,), rt60s=(0.1,), duration=0.5,
                           mixture_intensities=(float(value),)), est
        if self.axis == "votes":
            est = replace(est, votes=int(value), input_len=DEFAULT_RATE // 2)
            return replace(base, duration=0.5), est
        length = int(round(float(value) * est.window))
        return replace(base, duration=length / DEFAULT_RATE), replace(est, input_len=length)


@dataclass
class SweepRow:
    axis: str
    value: float
    method: str
    summary: Dict[str, float]


def write_sweep(rows: Sequence[SweepRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# itd-tool sweep v{SCHEMA_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            s = row.summary
            writer.writerow([row.axis, row.value, row.method, s["mae_ms"], s["rmse_ms"], s["lr_accuracy"], s["n"]])
    return path


def sweep(config: SweepConfig, params: Optional[ModelParams] = None,
          out_csv: Optional[Union[str, Path]] = None) -> List[SweepRow]:
    """One row per (method, value). Every value reuses the same scene seed."""
    rows = []
    cached: Dict[Tuple, List[EvalCase]] = {}
    for value in config.values:
        grid, est = config.condition(value)
        key = (grid.snrs, grid.rt60s, grid.mixture_intensities, grid.duration)
        if key not in cached:
            cached[key] = simulated_cases(grid, config.seed)
        for method in config.methods:
            report = evaluate(method, cached[key], est, params, config.seed)
            rows.append(SweepRow(config.axis, value, method, report.summary))
            logger.info("%s=%s %s: MAE %.4f ms", config.axis, value, method, report.summary["mae_ms"])
    if out_csv is not None:
        write_sweep(rows, out_csv)
    return rows
#endregion
