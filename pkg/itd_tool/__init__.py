# itd_tool/__init__.py

from .acoustics import (
    RoomConfig,
    Scene,
    SceneRecord,
    SimGrid,
    SourceSpec,
    add_noise,
    ground_truth_tdoa,
    make_mixture,
    render_scene,
    room_impulse_response,
    room_preset,
)
from .audio import MonoClip, Spectrogram, StereoClip, extract_windows, load_wav, resample, save_wav, stft_features
from .augment import AugmentConfig, AugmentRecord, Side, pipeline
from .bench import EvalReport, SweepConfig, evaluate, gen_dataset, sweep
from .embedder import (
    ArchConfig,
    EmbeddingSequence,
    ModelParams,
    backward,
    embed_sequence,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .errors import ErrorKind, ItdError
from .estimator import (
    DelayEstimate,
    Direction,
    EstimatorConfig,
    aggregate_mean,
    aggregate_mode_ransac,
    delay_to_angle,
    estimate_delay,
    iid_direction,
    vote_delays,
)
from .gcc import CorrelationCurve, classic_estimate, cross_correlation, gcc_phat
from .losses import AffinityMatrix, LossResult, affinity, crw_loss, monoclr_loss, zero_loss
from .trainer import OptState, TrainConfig, adamw_step, cosine_lr, train

__all__ = [
    "RoomConfig", "Scene", "SceneRecord", "SimGrid", "SourceSpec", "add_noise", "ground_truth_tdoa",
    "make_mixture", "render_scene", "room_impulse_response", "room_preset",
    "MonoClip", "Spectrogram", "StereoClip", "extract_windows", "load_wav", "resample", "save_wav",
    "stft_features",
    "AugmentConfig", "AugmentRecord", "Side", "pipeline",
    "EvalReport", "SweepConfig", "evaluate", "gen_dataset", "sweep",
    "ArchConfig", "EmbeddingSequence", "ModelParams", "backward", "embed_sequence", "forward",
    "init_model", "load_checkpoint", "save_checkpoint",
    "ErrorKind", "ItdError",
    "DelayEstimate", "Direction", "EstimatorConfig", "aggregate_mean", "aggregate_mode_ransac",
    "delay_to_angle", "estimate_delay", "iid_direction", "vote_delays",
    "CorrelationCurve", "classic_estimate", "cross_correlation", "gcc_phat",
    "AffinityMatrix", "LossResult", "affinity", "crw_loss", "monoclr_loss", "zero_loss",
    "OptState", "TrainConfig", "adamw_step", "cosine_lr", "train",
]
