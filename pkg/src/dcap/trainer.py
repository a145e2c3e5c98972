"""Mini-batch Adam training with AUC-based early stopping, and metrics."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import numerics as nx
from .errors import ContractError, MetricUndefinedError, TrainingDiverged
from .featurestore import DatasetSplit, EncodedDataset, minibatches
from .model import DcapConfig, Model, build_model, logloss, logloss_value

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 1e-6
    batch_size: int = 4096
    patience: int = 3
    max_epochs: int = 50
    decoupled_weight_decay: bool = False
    seed: int = 0
    eval_batch_size: int = 65536


# ----------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 0.001
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place on ``params``.

    Weight decay adds ``weight_decay * w`` to the gradient (classic L2)
    unless ``state.decoupled`` is set, in which case it shrinks the weight
    directly.
    """
    for p in params:
        if not np.isfinite(grads[p]).all():
            raise TrainingDiverged(f"non-finite gradient for {p.name or p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = grads[p]
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and state.decoupled:
            p.data = p.data - state.lr * state.weight_decay * p.data
        p.data = p.data - update
    return params, state


# -------------------------------------------------------------- metrics


def auc(scores, labels) -> float:
    """Rank (Mann-Whitney) AUC; tied scores earn half credit."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ContractError(f"scores {scores.shape} and labels {labels.shape} differ")
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricUndefinedError("AUC needs both positive and negative labels")
    return kernels.rank_auc(scores, labels)


@dataclass
class MetricsReport:
    auc: float
    logloss: float
    split: str
    count: int

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"AUC {self.auc} outside [0, 1]")


def evaluate(model: Model, data: EncodedDataset, split="test", batch_size=65536) -> MetricsReport:
    probs = model.predict(data.ids, batch_size)
    return MetricsReport(auc(probs, data.labels), logloss_value(probs, data.labels), split, len(data))


# -------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    val_logloss: float
    seconds: float

    def log_line(self):
        return f"{self.epoch}\t{self.train_loss:.10f}\t{self.val_auc:.10f}\t{self.val_logloss:.10f}\t{self.seconds:.3f}"


@dataclass
class TrainState:
    epoch: int = 0
    best_val_auc: float = -1.0
    best_epoch: int = 0
    since_improvement: int = 0
    patience: int = 3
    history: list = field(default_factory=list)
    stopped_early: bool = False

    def loss_curve(self):
        return [r.train_loss for r in self.history]


LOG_HEADER = "epoch\ttrain_loss\tval_auc\tval_logloss\tseconds"


def train_step(model: Model, ids, labels, adam: AdamState, rng, weight_decay_in_loss=0.0):
    params = model.parameters()
    with nx.Tape() as tape:
        probs = model.forward(ids, training=True, rng=rng)
        loss = logloss(probs, labels)
    if not np.isfinite(loss.item()):
        raise TrainingDiverged("loss is not finite")
    grads = tape.backward(loss, wrt=params)
    adam_step(params, grads, adam)
    return loss.item()


def train(kind, data: DatasetSplit, config: DcapConfig, tcfg: TrainConfig | None = None,
          log_fn=None, model: Model | None = None):
    """Train until validation AUC stalls for ``patience`` epochs.

    Returns ``(model, state)`` with the model holding the parameters of the
    best validation epoch. ``log_fn`` receives one tab-separated line per
    epoch.
    """
    tcfg = tcfg or TrainConfig()
    if model is None:
        model = build_model(kind, config, np.random.default_rng([tcfg.seed, 0]))
    adam = AdamState(lr=tcfg.lr, weight_decay=tcfg.weight_decay, decoupled=tcfg.decoupled_weight_decay)
    drop_rng = np.random.default_rng([tcfg.seed, 1])
    state = TrainState(patience=tcfg.patience)
    best = model.snapshot()
    train_set = data.train

    for epoch in range(1, tcfg.max_epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        try:
            for block in minibatches(len(train_set), tcfg.batch_size, tcfg.seed, epoch):
                loss = train_step(model, train_set.ids[block], train_set.labels[block], adam, drop_rng)
                total += loss * len(block)
                count += len(block)
        except TrainingDiverged as exc:
            model.restore(best)
            raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good=best) from exc
        report = evaluate(model, data.validation, "validation", tcfg.eval_batch_size)
        rec = EpochRecord(epoch, total / count, report.auc, report.logloss, time.perf_counter() - t0)
        state.history.append(rec)
        state.epoch = epoch
        if log_fn is not None:
            log_fn(rec.log_line())
        log.info("%s epoch %d loss %.5f val_auc %.5f", kind, epoch, rec.train_loss, rec.val_auc)
        if rec.val_auc > state.best_val_auc:
            state.best_val_auc = rec.val_auc
            state.best_epoch = epoch
            state.since_improvement = 0
            best = model.snapshot()
        else:
            state.since_improvement += 1
            if state.since_improvement >= tcfg.patience:
                state.stopped_early = True
                break
    model.restore(best)
    return model, state


def summarize(values):
    """Mean and sample standard deviation (0 for a single value)."""
    a = np.asarray(values, dtype=np.float64)
    std = float(a.std(ddof=1)) if a.size > 1 else 0.0
    return float(a.mean()), std


def format_cell(mean, std, digits=4):
    return f"{mean:.{digits}f}+/-{std:.{digits}f}"


def run_trials(kind, data: DatasetSplit, config: DcapConfig, tcfg: TrainConfig, trials: int,
               log_fn=None):
    """Independent runs with seeds ``tcfg.seed + k``; test metrics per trial."""
    results = []
    for k in range(trials):
        seed = tcfg.seed + k
        cfg = DcapConfig.from_dict({**config.to_dict(), "seed": seed})
        tc = TrainConfig(**{**tcfg.__dict__, "seed": seed})
        model, state = train(kind, data, cfg, tc, None if log_fn is None else (lambda line, k=k: log_fn(k, line)))
        rep = evaluate(model, data.test, "test", tc.eval_batch_size)
        results.append({"seed": seed, "auc": rep.auc, "logloss": rep.logloss, "epochs": state.epoch,
                        "best_epoch": state.best_epoch, "model": model, "state": state})
    return results
