"""Three-component loss, momentum SGD and the early-stopping training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .codec import as_assembly
from .errors import DivergenceError, ValidationError
from .model import ModelConfig, ModelParams, backward, forward_with_trace, init_params, predict

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    max_epochs: int = 100
    patience: int | None = 5
    learning_rate: float = 0.001
    momentum: float = 0.9
    loss_mode: str = "multi"
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in ("multi", "single"):
            raise ValidationError(f"loss_mode must be 'multi' or 'single', got {self.loss_mode!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be positive")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValidationError("learning_rate must be positive and momentum in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LossReport:
    total: float
    categorical_ce: float
    binary_ce: float
    mse: float
    families: dict[str, float] = field(default_factory=dict)

    @property
    def components(self) -> tuple[float, float, float]:
        return (self.categorical_ce, self.binary_ce, self.mse)

    def to_json(self) -> dict:
        return asdict(self)


def _clipped(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def _inside(p):
    return ((p > PROB_EPS) & (p < 1.0 - PROB_EPS)).astype(np.float64)


def loss_and_grad(pred, target, assembly, mode: str = "multi") -> tuple[LossReport, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. the post-activation outputs.

    ``multi``: categorical CE on each softmax block, binary CE averaged over the
    presence components, MSE averaged over the coordinates, summed without
    weights. ``single``: MSE over the whole vector. Targets are used as given,
    including the zero-filled blocks of absent events.
    """
    assembly = as_assembly(assembly)
    lay = assembly.layout
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim == 1:
        pred, target = pred[None], target[None]
    if pred.shape != target.shape or pred.shape[1] != lay.size:
        raise ValidationError(f"prediction {pred.shape} / target {target.shape} do not match "
                              f"assembly {assembly.value}")
    if not np.all(np.isfinite(pred)):
        raise DivergenceError("non-finite activations passed to the loss")
    B = pred.shape[0]
    grad = np.zeros_like(pred)

    if mode == "single":
        err = pred - target
        per = (err ** 2).mean(axis=1)
        grad[:] = 2.0 * err / (lay.size * B)
        m = float(per.mean())
        return LossReport(m, 0.0, 0.0, m, {"all": m}), grad
    if mode != "multi":
        raise ValidationError(f"unknown loss mode {mode!r}")

    fam = {f: np.zeros(B) for f in assembly.families}
    cce = np.zeros(B)
    for block, name in zip(lay.softmax_blocks, ("stage", "respiratory")):
        idx = list(block)
        p, t = pred[:, idx], target[:, idx]
        term = -(t * np.log(_clipped(p))).sum(axis=1)
        cce += term
        fam[name] += term
        grad[:, idx] = -t / _clipped(p) * _inside(p) / B

    bce = np.zeros(B)
    sig = lay.sigmoid_indices
    for i in sig:
        p, t = pred[:, i], target[:, i]
        pc = _clipped(p)
        term = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)) / len(sig)
        bce += term
        fam["arousal" if i == lay.arousal_presence else "respiratory"] += term
        grad[:, i] = (-t / pc + (1.0 - t) / (1.0 - pc)) * _inside(p) / (len(sig) * B)

    mse = np.zeros(B)
    lin = lay.linear_indices
    for i in lin:
        err = pred[:, i] - target[:, i]
        term = err ** 2 / len(lin)
        mse += term
        owner = "arousal" if lay.arousal_coords and i in lay.arousal_coords else "respiratory"
        fam[owner] += term
        grad[:, i] = 2.0 * err / (len(lin) * B)

    total = cce + bce + mse
    report = LossReport(float(total.mean()), float(cce.mean()), float(bce.mean()), float(mse.mean()),
                        {k: float(v.mean()) for k, v in fam.items()})
    return report, grad


def loss(pred, target, assembly, mode: str = "multi") -> LossReport:
    return loss_and_grad(pred, target, assembly, mode)[0]


def sgd_step(params, grads, velocity, lr: float, momentum: float):
    """Classical momentum, in place: ``v = momentum*v - lr*g; p = p + v``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise DivergenceError(f"gradient of {name} has {bad} non-finite entries; step aborted")
    tensors = params.tensors if isinstance(params, ModelParams) else params
    for name, g in grads.items():
        v = velocity[name]
        v *= momentum
        v -= lr * g
        tensors[name] += v
    return params, velocity


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    epochs_run: int = 0
    stopped_early: bool = False
    best_epoch: int = 0
    best_val_loss: float = math.inf

    def to_json(self) -> dict:
        return asdict(self)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.epochs:
                fh.write(json.dumps(e) + "\n")


def evaluate(params: ModelParams, inputs, targets, mode: str = "multi", indices=None,
             batch_size: int = 100) -> LossReport:
    """Example-weighted loss with dropout off."""
    if indices is not None:
        idx = np.asarray(indices)
        preds = np.concatenate([predict(params, inputs[idx[i:i + batch_size]], batch_size)
                                for i in range(0, len(idx), batch_size)])
        targets = np.asarray(targets)[idx]
    else:
        preds = predict(params, inputs, batch_size)
    return loss(preds, targets, params.config.assembly, mode)


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` updates."""

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record one epoch's loss; returns True when training should stop."""
        self.epoch += 1
        if value < self.best:
            self.best, self.best_epoch, self.stale = value, self.epoch, 0
        else:
            self.stale += 1
        return bool(self.patience) and self.stale >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


EpochCallback = Callable[[dict, ModelParams], bool]


def fit(params: ModelParams, inputs, targets, train_idx, val_idx, tcfg: TrainConfig,
        callback: EpochCallback | None = None) -> tuple[ModelParams, TrainLog]:
    """Train ``params`` in place and return a copy of the best-validation parameters.

    Batches are drawn from ``inputs[train_idx]`` in a seeded shuffle; the final
    partial batch is kept. ``callback(epoch_row, params)`` may return True to
    stop after the current epoch.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    targets = np.asarray(targets, dtype=np.float64)
    assembly = params.config.assembly
    rng = np.random.default_rng(tcfg.shuffle_seed)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    tlog = TrainLog()
    best = params.copy()
    stopper = EarlyStopping(tcfg.patience)

    for epoch in range(1, tcfg.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        n_seen, acc = 0, np.zeros(4)
        for b, start in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = np.sort(order[start:start + tcfg.batch_size])
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    out, trace = forward_with_trace(params, inputs[idx], training=True,
                                                    dropout_seed=[tcfg.shuffle_seed, epoch, b])
                    rep, g = loss_and_grad(out, targets[idx], assembly, tcfg.loss_mode)
                    if not math.isfinite(rep.total):
                        raise DivergenceError(f"loss is {rep.total}")
                    grads = backward(params, trace, g)
                sgd_step(params, grads, velocity, tcfg.learning_rate, tcfg.momentum)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch} batch {b}: {exc}") from exc
            acc += len(idx) * np.array([rep.total, *rep.components])
            n_seen += len(idx)
        acc /= n_seen

        try:
            with np.errstate(over="ignore", invalid="ignore"):
                val = evaluate(params, inputs, targets, tcfg.loss_mode, val_idx)
        except DivergenceError as exc:
            raise DivergenceError(f"epoch {epoch} validation: {exc}") from exc
        if not math.isfinite(val.total):
            raise DivergenceError(f"epoch {epoch}: validation loss is {val.total}")
        row = {
            "epoch": epoch,
            "train_loss": float(acc[0]),
            "train_components": [float(v) for v in acc[1:]],
            "val_loss": val.total,
            "val_components": list(val.components),
            "val_families": val.families,
        }
        tlog.epochs.append(row)
        tlog.epochs_run = epoch
        log.info("epoch %d train %.5f val %.5f", epoch, row["train_loss"], val.total)

        stop = stopper.update(val.total)
        if stopper.improved:
            tlog.best_val_loss, tlog.best_epoch = val.total, epoch
            best = params.copy()
        if callback is not None and callback(row, params):
            break
        if stop:
            tlog.stopped_early = epoch < tcfg.max_epochs
            break
    return best, tlog


def train(model_cfg: ModelConfig, dataset, tcfg: TrainConfig, params: ModelParams | None = None,
          callback: EpochCallback | None = None) -> tuple[ModelParams, TrainLog]:
    """Train on ``dataset.split`` (train/validation), starting from fresh params by default."""
    if dataset.split is None:
        raise ValidationError("dataset has no split")
    if model_cfg.D != dataset.cfg.D or model_cfg.L != dataset.cfg.L:
        raise ValidationError(f"model expects (D={model_cfg.D}, L={model_cfg.L}), dataset has "
                              f"(D={dataset.cfg.D}, L={dataset.cfg.L})")
    if model_cfg.assembly != dataset.cfg.assembly:
        raise ValidationError("model and dataset assemblies differ")
    if params is None:
        params = init_params(model_cfg)
    return fit(params, dataset.inputs, dataset.targets, dataset.split.train, dataset.split.validation,
               tcfg, callback)
