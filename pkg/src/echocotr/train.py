"""Optimization, the epoch loop and evaluation metrics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .data import StudyRecord, normalize
from .engine import ops
from .engine.tensor import Tape, Tensor
from .errors import ConfigError, DimensionError, NumericalError
from .model import EchoCoTrModel, ModelConfig, load_state, preset, state_arrays
from .sampling import Mode, SampleSpec, VideoClip, sample_clip

logger = logging.getLogger(__name__)

# Named random streams derived from one seed.
STREAMS = {"init": 0, "sampling": 1, "drop_path": 2, "shuffle": 3}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


@dataclass
class TrainConfig:
    epochs: int = 45
    batch_size: int = 25
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    spec: SampleSpec = field(default_factory=SampleSpec)
    model: ModelConfig = field(default_factory=lambda: preset("S"))
    norm_mean: float = 0.5
    norm_std: float = 0.25
    eval_batch_size: int = 16
    warm_start_head: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be > 0")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size >= 1 and epochs >= 0 required")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    r2: Optional[float]
    n: int

    def line(self) -> str:
        r2 = "nan" if self.r2 is None else f"{self.r2:.4f}"
        return f"MAE={self.mae:.4f} RMSE={self.rmse:.4f} R2={r2} n={self.n}"


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val: MetricsReport


# ---------------------------------------------------------------- loss and metrics

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; differentiable in ``pred``."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} and target {target.shape} differ")
    diff = ops.sub(pred, target)
    return ops.mean_over_axes(ops.mul(diff, diff))


def compute_metrics(pred, target) -> MetricsReport:
    """MAE, RMSE and R^2 of ``pred`` against ``target``.

    R^2 is ``None`` when the targets have zero variance or n < 2.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape or pred.size == 0:
        raise DimensionError("metrics need equally sized, non-empty vectors")
    err = pred - target
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    r2 = None if pred.size < 2 or ss_tot == 0.0 else 1.0 - float(np.sum(err ** 2)) / ss_tot
    return MetricsReport(mae, rmse, r2, int(pred.size))


# ---------------------------------------------------------------- AdamW

def _adamw_inplace(p, g, m, v, step, lr, wd, beta1, beta2, eps):
    if wd:
        p -= lr * wd * p
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: Optional[dict],
               cfg: TrainConfig, step_index: int) -> tuple[list[np.ndarray], dict]:
    """Functional AdamW with decoupled weight decay; ``step_index`` starts at 1.

    ``state`` holds first and second moment lists ``m`` and ``v`` (zeros when
    ``None``). Inputs are not modified.
    """
    if state is None:
        state = {"m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        p, m, v = np.array(p, copy=True), np.array(m, copy=True), np.array(v, copy=True)
        _adamw_inplace(p, np.asarray(g), m, v, step_index, cfg.lr, cfg.weight_decay,
                       cfg.betas[0], cfg.betas[1], cfg.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, {"m": new_m, "v": new_v}


class AdamW:
    """Stateful AdamW updating parameter tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            _adamw_inplace(p.data, p.grad, m, v, self.step_count, self.lr, self.weight_decay,
                           self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- batches

def make_batch(records: Sequence[StudyRecord], videos: Mapping[str, VideoClip], spec: SampleSpec,
               rng: Optional[np.random.Generator], mean: float, std: float,
               dtype=np.float32) -> tuple[Tensor, np.ndarray]:
    clips = []
    for rec in records:
        clip = sample_clip(videos[rec.file_name], spec, rng, rec.es_idx, rec.ed_idx)
        clips.append(normalize(clip, mean, std).frames)
    x = np.stack(clips)[:, None].astype(dtype, copy=False)
    y = np.array([r.ef for r in records], dtype=dtype)
    return Tensor(x), y


def _eval_spec(spec: SampleSpec) -> SampleSpec:
    return spec.fixed(0) if spec.mode is Mode.UNIFORM else spec


def predict(model: EchoCoTrModel, records: Sequence[StudyRecord], videos: Mapping[str, VideoClip],
            spec: SampleSpec, mean: float = 0.5, std: float = 0.25,
            batch_size: int = 16) -> np.ndarray:
    """Eval-mode predictions with a deterministic clip start."""
    was_training = model.training
    model.eval()
    spec = _eval_spec(spec)
    dtype = model.parameters()[0].dtype
    out = []
    try:
        for i in range(0, len(records), batch_size):
            x, _ = make_batch(records[i:i + batch_size], videos, spec, None, mean, std, dtype)
            out.append(model(x).data.astype(np.float64))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: EchoCoTrModel, records: Sequence[StudyRecord], videos: Mapping[str, VideoClip],
             spec: SampleSpec, mean: float = 0.5, std: float = 0.25, batch_size: int = 16,
             predictions_path: Union[str, Path, None] = None) -> MetricsReport:
    if not records:
        raise ConfigError("nothing to evaluate: empty split")
    pred = predict(model, records, videos, spec, mean, std, batch_size)
    target = np.array([r.ef for r in records])
    if predictions_path is not None:
        write_predictions(predictions_path, records, pred)
    return compute_metrics(pred, target)


def write_predictions(path, records: Sequence[StudyRecord], pred) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("file_name", "true_ef", "pred_ef"))
        for rec, p in zip(records, pred):
            w.writerow((rec.file_name, repr(float(rec.ef)), repr(float(p))))


def write_epoch_log(path, log: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_mae", "val_rmse", "val_r2"))
        for e in log:
            w.writerow((e.epoch, repr(e.train_loss), repr(e.val.mae), repr(e.val.rmse),
                        "" if e.val.r2 is None else repr(e.val.r2)))


# ---------------------------------------------------------------- training loop

def warm_start_head(model: EchoCoTrModel, targets) -> None:
    """Match the head's initial output statistics to the training targets.

    The bias becomes the target mean and the weights are rescaled so the
    spread of initial predictions is about the target standard deviation.
    Targets stay in raw units; Adam moves each weight by roughly ``lr`` per
    step, so a head drawn at sigma=0.02 would need thousands of steps just
    to span an EF range of tens of points.
    """
    targets = np.asarray(targets, dtype=np.float64)
    w = model.head.weight.data
    model.head.bias.data[...] = targets.mean()
    drawn = float(np.std(w))
    if drawn > 0:
        w *= targets.std() / (math.sqrt(w.shape[1]) * drawn)


def train_step(model: EchoCoTrModel, optimizer: AdamW, x: Tensor, y: np.ndarray) -> float:
    optimizer.zero_grad()
    with Tape() as tape:
        loss = mse_loss(model(x), y)
    tape.backward(loss)
    optimizer.step()
    return loss.item()


def train(train_records: Sequence[StudyRecord], val_records: Sequence[StudyRecord],
          videos: Mapping[str, VideoClip], cfg: TrainConfig,
          model: Optional[EchoCoTrModel] = None) -> tuple[EchoCoTrModel, list[EpochLog]]:
    """Fit ``cfg.model`` and return the weights with the best validation MAE.

    Each epoch shuffles the training studies, samples one clip per study,
    and takes one AdamW step per batch on the mean squared EF error.
    """
    if not train_records or not val_records:
        raise ConfigError("train and validation splits must both be non-empty")
    if model is None:
        model = EchoCoTrModel(cfg.model, stream(cfg.seed, "init"))
        if cfg.warm_start_head:
            warm_start_head(model, [r.ef for r in train_records])
    model.set_drop_path_rng(stream(cfg.seed, "drop_path"))
    sampling_rng = stream(cfg.seed, "sampling")
    shuffle_rng = stream(cfg.seed, "shuffle")
    dtype = model.parameters()[0].dtype
    opt = AdamW(model.parameters(), cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    train_records = list(train_records)
    log: list[EpochLog] = []
    best_mae, best_state = math.inf, None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = shuffle_rng.permutation(len(train_records))
        total, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_records[j] for j in order[i:i + cfg.batch_size]]
            x, y = make_batch(batch, videos, cfg.spec, sampling_rng, cfg.norm_mean, cfg.norm_std,
                              dtype)
            try:
                loss = train_step(model, opt, x, y)
            except NumericalError as exc:
                raise NumericalError(f"non-finite values at epoch {epoch}, step {opt.step_count}: "
                                     f"{exc}") from exc
            total += loss * len(batch)
            seen += len(batch)
        try:
            val = evaluate(model, val_records, videos, cfg.spec, cfg.norm_mean, cfg.norm_std,
                           cfg.eval_batch_size)
        except NumericalError as exc:
            raise NumericalError(f"non-finite values at epoch {epoch}, validation: {exc}") from exc
        log.append(EpochLog(epoch, total / seen, val))
        logger.info("epoch %d loss %.4f val %s", epoch, total / seen, val.line())
        if val.mae < best_mae:
            best_mae, best_state = val.mae, state_arrays(model)
    if best_state is not None:
        load_state(model, best_state)
    model.eval()
    return model, log
