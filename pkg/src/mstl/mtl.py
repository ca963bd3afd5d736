"""Multi-task baseline: one shared trunk, one classifier head per task.

Epochs alternate between tasks. Odd epochs train the target, even epochs
cycle through the sources in registry order, and each epoch is a full pass
over that task's training split.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import TrainingError, ValidationError
from .model import LAYER_NAMES, ArchitectureSpec, Model, build_model, init_layer, spec_with_classes
from .optim import (DROPOUT_STREAM, SHUFFLE_STREAM, AdamState, EarlyStopper, FitResult, TrainConfig, adam_step,
                    evaluate, fit, one_hot, train_epoch)
from .tensor import RngStream, Tensor

log = logging.getLogger(__name__)

HEAD = LAYER_NAMES[-1]
TRUNK_LAYERS = LAYER_NAMES[:-1]
HEAD_STREAM = 51


class MtlModel:
    """A single trunk parameter set plus per-task heads.

    ``view(task)`` returns a Model whose trunk entries are the very same
    Tensor objects for every task, so an update through one view is seen
    by all of them.
    """

    def __init__(self, spec: ArchitectureSpec, trunk: dict, heads: dict, class_counts: dict):
        self.spec = spec
        self.trunk = trunk
        self.heads = heads
        self.class_counts = class_counts
        self.tasks = list(heads)

    def view(self, task: str) -> Model:
        if task not in self.heads:
            raise ValidationError(f"unknown task {task!r}; known: {self.tasks}")
        params = dict(self.trunk)
        params.update(self.heads[task])
        return Model(spec_with_classes(self.spec, self.class_counts[task]), params, {"lineage": f"mtl:{task}"})

    def head_state(self, task: str) -> dict:
        return {k: v.data.copy() for k, v in self.heads[task].items()}

    def state(self) -> dict:
        out = {k: v.data.copy() for k, v in self.trunk.items()}
        for t, head in self.heads.items():
            out.update({f"{t}/{k}": v.data.copy() for k, v in head.items()})
        return out

    def load_state(self, state: dict) -> None:
        for k, v in self.trunk.items():
            v.data = state[k].copy()
        for t, head in self.heads.items():
            for k, v in head.items():
                v.data = state[f"{t}/{k}"].copy()

    def extract(self, task: str) -> Model:
        """Independent copy of trunk + ``task`` head as a standard Model."""
        return self.view(task).copy(lineage=f"mtl:{task}")


def trunk_hash(model: Model) -> str:
    """SHA-256 over the trunk parameters as seen through ``model``."""
    h = hashlib.sha256()
    for name in TRUNK_LAYERS:
        for part in ("weight", "bias"):
            h.update(np.ascontiguousarray(model.params[f"{name}.{part}"].data).tobytes())
    return h.hexdigest()


def build_mtl(spec: ArchitectureSpec, class_counts: dict, rng: RngStream) -> MtlModel:
    """Trunk initialized as ``build_model`` would; head ``i`` from its own child stream."""
    base = build_model(spec_with_classes(spec, next(iter(class_counts.values()))), rng)
    trunk = {k: v for k, v in base.params.items() if k.split(".")[0] in TRUNK_LAYERS}
    heads = {}
    for i, (task, k) in enumerate(class_counts.items()):
        w, b = init_layer(spec_with_classes(spec, k), HEAD, rng.child(HEAD_STREAM, i))
        heads[task] = {f"{HEAD}.weight": Tensor(w, requires_grad=True), f"{HEAD}.bias": Tensor(b, requires_grad=True)}
    return MtlModel(spec, trunk, heads, dict(class_counts))


def schedule(epoch: int, sources: Sequence[str], target: str = "T") -> str:
    """Task trained at 1-based ``epoch``: odd -> target, even -> source ((e/2 - 1) mod S)."""
    if epoch < 1:
        raise ValidationError("epochs are numbered from 1")
    if epoch % 2 == 1:
        return target
    return sources[(epoch // 2 - 1) % len(sources)]


@dataclass
class ScheduleEntry:
    epoch: int
    task: str
    train_loss: float
    val_favg: Optional[float] = None


@dataclass
class MtlResult:
    model: MtlModel
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = float("nan")

    def schedule_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "task", "train_loss", "val_favg"])
        for e in self.log:
            w.writerow([e.epoch, e.task, repr(float(e.train_loss)), "" if e.val_favg is None else repr(e.val_favg)])
        return buf.getvalue()


def _train_split(ps):
    return ps.subset("train") if ps.splits is not None else ps


def mtl_train(target: tuple, sources: Sequence[tuple], spec: ArchitectureSpec, config: TrainConfig,
              on_epoch: Optional[Callable] = None) -> MtlResult:
    """Alternating-epoch multi-task training.

    ``target`` and each source are ``(name, PatchSet)``; the target set must
    carry a val split. Early stopping counts target epochs only and
    ``config.max_epochs`` caps the number of target epochs; the state with
    the best target validation F_avg is returned.
    ``on_epoch(entry, mtl_model)`` runs after every epoch.
    """
    if not sources:
        raise ValidationError("mtl_train needs at least one source task")
    tname, tset = target
    names = [tname] + [n for n, _ in sources]
    if len(set(names)) != len(names):
        raise ValidationError(f"task names must be unique, got {names}")
    sets = {tname: tset, **dict(sources)}
    train = {}
    for i, (n, ps) in enumerate(sets.items()):
        tr = _train_split(ps)
        if len(tr) == 0:
            raise TrainingError(f"mtl: task {n!r} has an empty training split")
        x = np.asarray(tr.patches, dtype=np.float32)
        train[n] = (x[:, None] if x.ndim == 3 else x, one_hot(tr.labels, ps.num_classes), i)
    val = tset.subset("val")
    if len(val) == 0:
        raise TrainingError("mtl: target task has an empty val split")

    from .transfer import init_rng
    mtl = build_mtl(spec, {n: sets[n].num_classes for n in names}, init_rng(config.seed))
    trunk_state = AdamState()
    head_states = {n: AdamState() for n in names}
    shuffle = {n: RngStream(config.seed, SHUFFLE_STREAM).child(train[n][2]) for n in names}
    dropout = RngStream(config.seed, DROPOUT_STREAM)
    stopper = EarlyStopper(config.patience_epochs, config.min_improvement, config.relative_improvement)
    result = MtlResult(mtl)
    best_state = mtl.state()
    src_names = names[1:]

    for epoch in range(1, 2 * config.max_epochs):
        task = schedule(epoch, src_names, tname)
        view = mtl.view(task)
        x, y, _ = train[task]

        def update(m, task=task):
            trunk = {k: p for k, p in m.params.items() if not k.startswith(HEAD)}
            head = {k: p for k, p in m.params.items() if k.startswith(HEAD)}
            adam_step(trunk, {k: p.grad for k, p in trunk.items()}, trunk_state, config)
            adam_step(head, {k: p.grad for k, p in head.items()}, head_states[task], config)

        loss = train_epoch(view, x, y, config.batch_size, shuffle[task], dropout, update,
                           f"mtl epoch {epoch} task {task} (seed {config.seed})")
        entry = ScheduleEntry(epoch, task, loss)
        stop = False
        if task == tname:
            score = evaluate(view, val.patches, val.labels)
            entry.val_favg = score
            prev = stopper.best_score
            stop = stopper.update(score)
            if score > prev:
                best_state = mtl.state()
                result.best_epoch, result.best_score = epoch, score
        result.log.append(entry)
        log.info("mtl seed=%d epoch=%d task=%s loss=%.4f%s", config.seed, epoch, task, loss,
                 "" if entry.val_favg is None else f" val_favg={entry.val_favg:.4f}")
        if on_epoch is not None:
            on_epoch(entry, mtl)
        if stop:
            break
    mtl.load_state(best_state)
    return result


def mtl_finetune(model: MtlModel, task: str, target, config: TrainConfig) -> FitResult:
    """Fine-tune trunk + ``task`` head as a standalone model on ``target``."""
    m = model.extract(task)
    if m.num_classes != target.num_classes:
        raise ValidationError(f"head {task!r} has {m.num_classes} outputs, target has {target.num_classes} classes")
    res = fit(m, target, target, config)
    res.model.meta["lineage"] = f"mtl-finetuned:{task}"
    return res

