"""Two-stage sequential fine-tuning, test-set MAE, and backward transfer.

Stage one trains on dataset A, stage two continues from the stage-one
weights on dataset B. Both datasets are scored after each stage, each in
the standardized units of its own train-region scaler. Backward transfer
is ``MAE_A(after B) - MAE_A(after A)``, so a positive value means the model
forgot A.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import synthgen
from .forecaster import (ModelConfig, Params, forward, init_params, load_checkpoint,
                         param_hash, save_checkpoint)
from .optim import TrainConfig, train
from .pipeline import (DEFAULT_FRACTIONS, Scaler, SplitIndices, TimeSeries, WindowConfig,
                       WindowSet, fit_scaler, make_eval_windows, make_train_windows,
                       split_series)

log = logging.getLogger(__name__)

Forecast = Callable[[np.ndarray], np.ndarray]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one protocol run depends on, with flat JSON keys.

    ``context_len`` and ``horizon`` are shared by the window and model
    settings.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    window: WindowConfig = field(default_factory=WindowConfig)

    def __post_init__(self):
        if (self.model.context_len, self.model.horizon) != (self.window.context_len, self.window.horizon):
            raise ConfigError("model and window context_len/horizon disagree")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = sorted(set(raw) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**default_config_dict(), **raw}
        try:
            model = ModelConfig(**{k: merged[k] for k in _MODEL_KEYS})
            tcfg = TrainConfig(**{k: merged[k] for k in _TRAIN_KEYS})
            window = WindowConfig(**{k: merged[k] for k in _WINDOW_KEYS})
            return cls(model, tcfg, window)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self.model)
        out.update(dataclasses.asdict(self.train))
        out.update(dataclasses.asdict(self.window))
        return {k: out[k] for k in CONFIG_KEYS}

    def with_train(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            model=dataclasses.replace(self.model, init_seed=seed),
            train=dataclasses.replace(self.train, shuffle_seed=seed))


_MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig)]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]
_WINDOW_KEYS = [f.name for f in dataclasses.fields(WindowConfig)]
CONFIG_KEYS = list(dict.fromkeys(_TRAIN_KEYS + _MODEL_KEYS + _WINDOW_KEYS))


def default_config_dict() -> dict:
    out = dataclasses.asdict(ModelConfig())
    out.update(dataclasses.asdict(TrainConfig()))
    out.update(dataclasses.asdict(WindowConfig()))
    return {k: out[k] for k in CONFIG_KEYS}


@dataclass
class PreparedDataset:
    name: str
    series: TimeSeries
    split: SplitIndices
    scaler: Scaler
    standardized: np.ndarray

    def train_windows(self, wcfg: WindowConfig) -> WindowSet:
        return make_train_windows(self.standardized, self.split, wcfg)

    def eval_windows(self, wcfg: WindowConfig, region: str = "test") -> WindowSet:
        return make_eval_windows(self.standardized, self.split, region, wcfg)


def prepare_dataset(series: TimeSeries, name: str, wcfg: WindowConfig | None = None,
                    fractions=DEFAULT_FRACTIONS) -> PreparedDataset:
    """Split chronologically and standardize with train-region statistics."""
    wcfg = wcfg or WindowConfig()
    split = split_series(series, fractions, wcfg)
    scaler = fit_scaler(series.values, range(0, split.train_end))
    return PreparedDataset(name, series, split, scaler, scaler.transform(series.values))


def _predictor(model) -> Forecast:
    if callable(model):
        return model
    return lambda contexts: forward(model, contexts)


def mean_abs_error(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def evaluate(model, dataset: PreparedDataset, wcfg: WindowConfig | None = None,
             region: str = "test") -> float:
    """MAE over every eval window and horizon step, in standardized units.

    ``model`` is either a parameter dict or a callable mapping a batch of
    contexts to a batch of forecasts.
    """
    wcfg = wcfg or WindowConfig()
    windows = dataset.eval_windows(wcfg, region)
    if len(windows) == 0:
        raise ValueError(f"{dataset.name}: no {region} windows")
    return mean_abs_error(_predictor(model)(windows.contexts), windows.targets)


def compute_bwt(mae_before: float, mae_after: float) -> float:
    """Backward transfer on the old task; positive means forgetting."""
    for v in (mae_before, mae_after):
        if not math.isfinite(v):
            raise ValueError(f"MAE must be finite, got {v}")
        if v < 0:
            raise ValueError(f"MAE must be >= 0, got {v}")
    return mae_after - mae_before


@dataclass
class StageResult:
    stage_id: int
    trained_on: str
    mae_by_dataset: dict[str, float]
    val_mae_by_dataset: dict[str, float]
    epoch_losses: list[float]
    checkpoint_path: str | None
    param_hash: str
    train_config: dict

    def __post_init__(self):
        for k, v in self.mae_by_dataset.items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"invalid MAE for {k}: {v}")

    def to_dict(self) -> dict:
        return {
            "stage_id": self.stage_id,
            "trained_on": self.trained_on,
            "mae": dict(self.mae_by_dataset),
            "val_mae": dict(self.val_mae_by_dataset),
            "epoch_losses": list(self.epoch_losses),
            "checkpoint": self.checkpoint_path,
            "param_hash": self.param_hash,
            "train_config": dict(self.train_config),
        }


@dataclass
class ProtocolReport:
    dataset_a: str
    dataset_b: str
    stage1: StageResult
    stage2: StageResult
    bwt_a: float
    config: dict
    stage2_start_hash: str
    scalers: dict[str, dict[str, float]]
    initial_checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "pair": [self.dataset_a, self.dataset_b],
            "lr": self.config["lr"],
            "epochs": self.config["epochs"],
            "seed": self.config["init_seed"],
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "bwt_a": self.bwt_a,
            "stage2_start_hash": self.stage2_start_hash,
            "scalers": self.scalers,
            "mae_units": "standardized (each dataset's own train-region scaler)",
            "initial_checkpoint": self.initial_checkpoint,
            "config": self.config,
        }


def _score(params: Params, datasets: list[PreparedDataset], wcfg: WindowConfig, region: str):
    return {d.name: evaluate(params, d, wcfg, region) for d in datasets}


def run_protocol(dataset_a: PreparedDataset, dataset_b: PreparedDataset,
                 cfg: ExperimentConfig | None = None, initial_checkpoint=None,
                 out_dir=None) -> ProtocolReport:
    """Fine-tune on A, then on B, scoring both datasets after each stage.

    Checkpoints ``stage1.ckpt``/``stage2.ckpt`` go to ``out_dir`` when given;
    the report stores their names relative to it.
    """
    cfg = cfg or ExperimentConfig()
    if dataset_a.name == dataset_b.name:
        raise ValueError("datasets must differ")
    wcfg = cfg.window
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if initial_checkpoint is not None:
        params, ckpt_cfg = load_checkpoint(initial_checkpoint)
        if ckpt_cfg.param_shapes() != cfg.model.param_shapes():
            raise ValueError("initial checkpoint does not match the model config")
    else:
        params = init_params(cfg.model)
    both = [dataset_a, dataset_b]
    tcfg = dataclasses.asdict(cfg.train)

    stages = []
    start_hash = ""
    for stage_id, ds in ((1, dataset_a), (2, dataset_b)):
        if stage_id == 2:
            start_hash = param_hash(params)
        log.info("stage %d: training on %s", stage_id, ds.name)
        result = train(params, ds.train_windows(wcfg), cfg.train)
        params = result.params
        ckpt = None
        if out is not None:
            ckpt = f"stage{stage_id}.ckpt"
            save_checkpoint(params, cfg.model, out / ckpt)
        stages.append(StageResult(
            stage_id, ds.name,
            _score(params, both, wcfg, "test"),
            _score(params, both, wcfg, "val"),
            result.epoch_losses, ckpt, param_hash(params), tcfg))

    s1, s2 = stages
    bwt = compute_bwt(s1.mae_by_dataset[dataset_a.name], s2.mae_by_dataset[dataset_a.name])
    return ProtocolReport(
        dataset_a.name, dataset_b.name, s1, s2, bwt, cfg.to_dict(),
        stage2_start_hash=start_hash,
        scalers={d.name: {"mean": d.scaler.mean, "std": d.scaler.std} for d in both},
        initial_checkpoint=str(initial_checkpoint) if initial_checkpoint is not None else None)


def generalist_pool(pool_size: int, seed: int, n_steps: int = synthgen.DEFAULT_N_STEPS):
    """``pool_size`` random multi-sinusoid series (3-10 components, periods 20-1400)."""
    if pool_size < 1:
        raise ValueError(f"pool_size must be >= 1, got {pool_size}")
    rng = np.random.default_rng(seed)
    gcfg = synthgen.GenerationConfig(n_steps=n_steps)
    return [synthgen.generate_series(synthgen.random_spec(rng), gcfg) for _ in range(pool_size)]


def pretrain_on(series_list, cfg: ExperimentConfig) -> Params:
    """Train from scratch on the union of every series' train windows."""
    wcfg = cfg.window
    sets = [prepare_dataset(s, f"pool{i}", wcfg).train_windows(wcfg)
            for i, s in enumerate(series_list)]
    pooled = WindowSet(np.concatenate([w.contexts for w in sets]),
                       np.concatenate([w.targets for w in sets]),
                       np.concatenate([w.target_start_indices for w in sets]))
    return train(init_params(cfg.model), pooled, cfg.train).params


def pretrain_generalist(pool_size: int, cfg: ExperimentConfig | None = None, seed: int = 0,
                        out_path=None) -> Params:
    """Build a generic starting checkpoint from a seeded pool of random signals.

    Writes the checkpoint to ``out_path`` when given (usable as
    ``initial_checkpoint`` for ``run_protocol``) and returns the parameters.
    """
    cfg = cfg or ExperimentConfig()
    params = pretrain_on(generalist_pool(pool_size, seed), cfg)
    if out_path is not None:
        save_checkpoint(params, cfg.model, out_path)
    return params
