"""Adam, the patience-based early-stopping rule and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError, TrainingError, ValidationError
from .metrics import confusion, f_avg
from .tensor import RngStream

log = logging.getLogger(__name__)

# stream ids for the independent random streams of one training run
SHUFFLE_STREAM = 11
DROPOUT_STREAM = 12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 128
    patience_epochs: int = 200
    min_improvement: float = 0.005
    relative_improvement: bool = False
    max_epochs: int = 2000
    seed: int = 0
    snapshots_kept: int = 3

    def __post_init__(self):
        if self.patience_epochs < 1:
            raise ValidationError("patience_epochs must be >= 1")
        if self.min_improvement < 0:
            raise ValidationError("min_improvement must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


class AdamState:
    """Per-parameter first/second moments and the shared timestep."""

    def __init__(self):
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """In-place Adam update with bias correction."""
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        arr = p.data if isinstance(p, T.Tensor) else p
        if g.shape != arr.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {arr.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m, v = state.m[name], state.v[name]
        m *= arr.dtype.type(b1)
        m += arr.dtype.type(1.0 - b1) * g
        v *= arr.dtype.type(b2)
        v += arr.dtype.type(1.0 - b2) * (g * g)
        m_hat = m / arr.dtype.type(bc1)
        v_hat = v / arr.dtype.type(bc2)
        arr -= arr.dtype.type(config.learning_rate) * m_hat / (np.sqrt(v_hat) + arr.dtype.type(config.epsilon))


class EarlyStopper:
    """Stop once ``patience`` consecutive epochs fail to beat the best score.

    An epoch counts as an improvement when its score exceeds the best score
    seen so far by at least ``min_improvement`` (absolute, or relative to the
    best when ``relative`` is set). The best epoch is the earliest epoch
    holding the maximum score.
    """

    TOL = 1e-12

    def __init__(self, patience: int, min_improvement: float, relative: bool = False):
        self.patience = patience
        self.min_improvement = min_improvement
        self.relative = relative
        self.best_score = -math.inf
        self.best_epoch = -1
        self.since_improvement = 0
        self.epoch = -1
        self.stopped = False

    def threshold(self) -> float:
        if self.best_score == -math.inf:
            return -math.inf
        if self.relative:
            return self.best_score * (1.0 + self.min_improvement)
        return self.best_score + self.min_improvement

    def update(self, score: float) -> bool:
        """Record one epoch's score; returns True when training should stop."""
        if self.stopped:
            raise RuntimeError("EarlyStopper.update called after stop")
        self.epoch += 1
        improved = score >= self.threshold() - self.TOL
        if improved:
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = self.epoch
        self.stopped = self.since_improvement >= self.patience
        return self.stopped


@dataclass
class Snapshot:
    epoch: int
    val_score: float
    state: dict


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_favg: list = field(default_factory=list)
    best_epoch: int = -1
    snapshot_epochs: list = field(default_factory=list)
    tags: list = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_score(self) -> float:
        return self.val_favg[self.best_epoch] if self.best_epoch >= 0 else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_favg", "is_best"])
        for e, (loss, score) in enumerate(zip(self.train_loss, self.val_favg)):
            w.writerow([e + 1, repr(float(loss)), repr(float(score)), int(e == self.best_epoch)])
        return buf.getvalue()


@dataclass
class FitResult:
    model: object
    history: TrainHistory
    snapshots: list
    final_state: dict


def evaluate(model, patches: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    probs = model.predict_proba(patches, batch_size)
    return f_avg(confusion(probs.argmax(axis=1), labels, model.num_classes))


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    return np.eye(num_classes, dtype=dtype)[np.asarray(labels, dtype=np.int64)]


def _as_arrays(data, split: Optional[str] = None):
    """Accept a PatchSet (optionally restricted to one split) or (x, y)."""
    if hasattr(data, "patches"):
        if split is not None and data.splits is not None:
            data = data.subset(split)
        return data.patches, data.labels
    x, y = data
    return np.asarray(x), np.asarray(y)


def train_epoch(model, x: np.ndarray, targets: np.ndarray, batch_size: int, shuffle_rng: RngStream,
                dropout_rng: RngStream, update: Callable, where: str = "train") -> float:
    """One shuffled pass over ``x``; ``update(model)`` applies the step after each backward.

    The final short batch is kept. Returns the sample-weighted mean loss.
    """
    n = len(x)
    order = shuffle_rng.permutation(n)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        model.zero_grad()
        logits = model.forward_logits(x[idx], training=True, rng=dropout_rng)
        loss, _ = T.softmax_xent(logits, targets[idx])
        lv = float(loss.data)
        if not math.isfinite(lv):
            raise TrainingError(f"{where}: non-finite loss {lv} in batch starting at {start}")
        T.backward(loss)
        update(model)
        total += lv * len(idx)
    return total / n


def train_loop(model, x_train: np.ndarray, targets: np.ndarray, x_val: np.ndarray, y_val: np.ndarray,
               config: TrainConfig, on_epoch: Optional[Callable] = None, tag: str = "fit") -> FitResult:
    """Shared mini-batch loop used by ``fit`` and distillation.

    ``targets`` holds one probability row per training patch (one-hot for
    hard labels). After each epoch the validation F_avg drives early
    stopping; the best-validation weights are returned.
    """
    n = len(x_train)
    if n == 0:
        raise TrainingError(f"{tag}: empty training set")
    if len(y_val) == 0:
        raise TrainingError(f"{tag}: empty validation set")
    if targets.shape != (n, model.num_classes):
        raise ShapeError(f"{tag}: targets shape {targets.shape} != ({n}, {model.num_classes})")
    x_train = np.asarray(x_train, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    if x_train.ndim == 3:
        x_train = x_train[:, None]

    shuffle_rng = RngStream(config.seed, SHUFFLE_STREAM)
    dropout_rng = RngStream(config.seed, DROPOUT_STREAM)
    state = AdamState()
    stopper = EarlyStopper(config.patience_epochs, config.min_improvement, config.relative_improvement)
    history = TrainHistory()
    snapshots: list[Snapshot] = []
    best_state = model.state()

    def update(m):
        params = m.trainable()
        adam_step(params, {k: p.grad for k, p in params.items()}, state, config)

    for epoch in range(config.max_epochs):
        train_loss = train_epoch(model, x_train, targets, config.batch_size, shuffle_rng, dropout_rng, update,
                                 f"{tag} epoch {epoch + 1} (seed {config.seed})")
        score = evaluate(model, x_val, y_val)
        prev_best = stopper.best_score
        stop = stopper.update(score)
        history.train_loss.append(train_loss)
        history.val_favg.append(score)
        history.tags.append(tag)
        if score > prev_best:
            best_state = model.state()
            history.best_epoch = epoch
            snapshots.append(Snapshot(epoch + 1, score, best_state))
            # the newest entry is the returned model itself
            if len(snapshots) > config.snapshots_kept + 1:
                snapshots.pop(0)
        log.info("%s seed=%d epoch=%d loss=%.4f val_favg=%.4f%s", tag, config.seed, epoch + 1,
                 train_loss, score, " *" if score > prev_best else "")
        if on_epoch is not None:
            on_epoch(epoch, train_loss, score)
        if stop:
            break

    final_state = model.state()
    model.load_state(best_state)
    snapshots = snapshots[:-1]
    history.snapshot_epochs = [s.epoch for s in snapshots]
    model.meta.update(epoch=history.best_epoch + 1, val_score=history.best_score, seed=config.seed)
    return FitResult(model, history, snapshots, final_state)


def fit(model, train, val, config: TrainConfig, on_epoch: Optional[Callable] = None) -> FitResult:
    """Train ``model`` in place on hard labels and return the best-validation state.

    ``train``/``val`` are PatchSets (the train/val splits are taken when the
    set carries split tags) or ``(patches, labels)`` tuples. A snapshot is
    taken at every new validation best; the ``config.snapshots_kept`` most
    recent ones preceding the returned best are kept.
    """
    x_tr, y_tr = _as_arrays(train, "train")
    x_va, y_va = _as_arrays(val, "val")
    if len(y_tr) and (y_tr.max() >= model.num_classes or y_tr.min() < 0):
        raise ValidationError(f"fit: training labels outside [0, {model.num_classes})")
    return train_loop(model, x_tr, one_hot(y_tr, model.num_classes), x_va, y_va, config, on_epoch)
