"""Model pools, greedy forward ensemble selection and the bagging baseline.

Selection works entirely on validation probability matrices cached once per
pool member, so a selection run is pure arithmetic.
"""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .metrics import confusion, f_avg
from .model import ArchitectureSpec, Model, build_model, load_checkpoint, spec_with_classes
from .optim import FitResult, TrainConfig, fit
from .tensor import RngStream

log = logging.getLogger(__name__)

SELECT_STREAM = 41
BAG_STREAM = 42
DEFAULT_CAP = 50


def _score(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    return f_avg(confusion(probs.argmax(axis=1), labels, k))


@dataclass
class PoolMember:
    id: int
    model: Optional[Model]
    lineage: str
    val_probs: np.ndarray
    val_favg: float


@dataclass
class ModelPool:
    members: list
    val_labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.members)

    def probs(self) -> np.ndarray:
        """Stacked cached matrices, shape (members, samples, classes)."""
        return np.stack([m.val_probs for m in self.members])

    def scores(self) -> np.ndarray:
        return np.array([m.val_favg for m in self.members])

    def with_lineage(self, prefix: str) -> "ModelPool":
        keep = [m for m in self.members if m.lineage.startswith(prefix)]
        return ModelPool(keep, self.val_labels, self.num_classes)

    def add(self, model: Optional[Model], lineage: str, val_probs: np.ndarray) -> PoolMember:
        val_probs = np.asarray(val_probs, dtype=np.float64)
        if val_probs.shape != (len(self.val_labels), self.num_classes):
            raise ValidationError(f"pool member probabilities have shape {val_probs.shape}, expected "
                                  f"{(len(self.val_labels), self.num_classes)}")
        if np.abs(val_probs.sum(axis=1) - 1.0).max() > 1e-5:
            raise ValidationError("pool member probability rows must sum to 1")
        m = PoolMember(len(self.members), model, lineage, val_probs,
                       _score(val_probs, self.val_labels, self.num_classes))
        self.members.append(m)
        return m

    @classmethod
    def from_probs(cls, mats: Sequence[np.ndarray], val_labels, num_classes: Optional[int] = None) -> "ModelPool":
        """Pool of bare probability matrices (no models attached)."""
        labels = np.asarray(val_labels)
        k = num_classes or np.asarray(mats[0]).shape[1]
        pool = cls([], labels, k)
        for i, m in enumerate(mats):
            pool.add(None, f"matrix{i}", m)
        return pool


def _models_of(run) -> list[tuple[Model, str]]:
    if isinstance(run, Model):
        return [(run, run.meta.get("lineage", "model"))]
    if isinstance(run, FitResult):
        final = run.model
        tag = final.meta.get("lineage", "model")
        out = [(final, tag)]
        for snap in run.snapshots:
            m = final.copy(epoch=snap.epoch, val_score=snap.val_score, lineage=f"snapshot{snap.epoch}<{tag}")
            m.load_state(snap.state)
            out.append((m, m.meta["lineage"]))
        return out
    raise TypeError(f"pool entries must be Model or FitResult, got {type(run).__name__}")


def train_scratch(count: int, train, val, spec: ArchitectureSpec, config: TrainConfig,
                  base_seed: int) -> list[FitResult]:
    """``count`` randomly initialized models trained from scratch, seeds base_seed+i."""
    from .transfer import init_rng
    out = []
    for i in range(count):
        seed = base_seed + i
        out.append(fit(build_model(spec, init_rng(seed)), train, val, config.with_seed(seed)))
    return out


def build_pool(runs: Sequence, val, n_scratch: int = 0, train=None, spec: Optional[ArchitectureSpec] = None,
               config: Optional[TrainConfig] = None, scratch_seed: int = 10_000) -> ModelPool:
    """Pool of every final model and retained snapshot in ``runs`` plus ``n_scratch`` scratch models.

    ``runs`` holds FitResults (final + snapshots) or bare Models. Scratch
    members need ``train``, ``spec`` and ``config``.
    """
    val = val.subset("val") if val.splits is not None else val
    entries = [e for r in runs for e in _models_of(r)]
    if n_scratch:
        if train is None or spec is None or config is None:
            raise ValidationError("build_pool: scratch members need train, spec and config")
        k = val.num_classes
        for res in train_scratch(n_scratch, train, val, spec_with_classes(spec, k), config, scratch_seed):
            res.model.meta["lineage"] = "scratch"
            entries.extend(_models_of(res))
    if not entries:
        raise ValidationError("build_pool: no models given")
    k = entries[0][0].num_classes
    for model, tag in entries:
        if model.num_classes != k:
            raise ValidationError(f"build_pool: member {tag} has {model.num_classes} classes, expected {k}")
    if val.num_classes != k:
        raise ValidationError(f"build_pool: validation set has {val.num_classes} classes, models have {k}")
    pool = ModelPool([], val.labels.copy(), k)
    for model, tag in entries:
        pool.add(model, tag, model.predict_proba(val.patches).astype(np.float64))
    return pool


# ---------------------------------------------------------------- selection

@dataclass
class Selection:
    """One greedy run: member multiplicities and the accepted-step trace."""
    counts: dict
    trace: list  # (step, member id, val F_avg after the step)
    init: list

    @property
    def size(self) -> int:
        return sum(self.counts.values())


def forward_select(pool: ModelPool, subset: Sequence[int], n_init: int, cap: int = DEFAULT_CAP) -> Selection:
    """Greedy forward selection with replacement over ``subset`` (pool member ids).

    The ``n_init`` best members by validation F_avg seed the ensemble (ties
    to the smallest id). Each step adds the member, from the whole subset,
    whose inclusion gives the highest ensemble F_avg (ties to the smallest
    id); the run stops when that best addition is not a strict improvement
    or the ensemble reaches ``cap`` members.
    """
    subset = sorted(set(int(i) for i in subset))
    if not subset:
        raise ValidationError("forward_select: empty subset")
    if not 1 <= n_init <= len(subset):
        raise ValidationError(f"forward_select: N={n_init} must lie in 1..{len(subset)} (subset size)")
    if n_init > cap:
        raise ValidationError(f"forward_select: N={n_init} exceeds the size cap {cap}")
    labels, k = pool.val_labels, pool.num_classes
    ranked = sorted(subset, key=lambda i: (-pool.members[i].val_favg, i))
    init = ranked[:n_init]
    counts = {i: 1 for i in init}
    total = sum(pool.members[i].val_probs for i in init)
    size = n_init
    best = _score(total / size, labels, k)
    trace = [(0, -1, best)]
    step = 0
    while size < cap:
        cand_score, cand = -1.0, None
        for i in subset:
            s = _score((total + pool.members[i].val_probs) / (size + 1), labels, k)
            if s > cand_score:
                cand_score, cand = s, i
        if cand_score <= best:
            break
        step += 1
        total = total + pool.members[cand].val_probs
        size += 1
        counts[cand] = counts.get(cand, 0) + 1
        best = cand_score
        trace.append((step, cand, best))
    return Selection(dict(sorted(counts.items())), trace, init)


@dataclass
class Ensemble:
    """Multiset of pool members, grouped into sub-ensembles averaged with equal weight."""
    groups: list  # list of {member id: multiplicity}
    models: dict = field(default_factory=dict)  # member id -> Model (may be empty)
    val_favg: float = float("nan")
    traces: list = field(default_factory=list)

    def __post_init__(self):
        if not self.groups or any(not g or min(g.values()) < 1 for g in self.groups):
            raise ValidationError("an ensemble needs at least one member in every group")

    def member_ids(self) -> list[int]:
        return sorted({i for g in self.groups for i in g})

    def weights(self) -> dict:
        """Effective weight of each member in the final average."""
        w: dict = {}
        for g in self.groups:
            tot = sum(g.values())
            for i, c in g.items():
                w[i] = w.get(i, 0.0) + c / tot / len(self.groups)
        return dict(sorted(w.items()))

    def combine(self, member_probs: dict) -> np.ndarray:
        """Mean over groups of the multiplicity-weighted group means."""
        out = None
        for g in self.groups:
            tot = sum(g.values())
            gm = sum(c * np.asarray(member_probs[i], dtype=np.float64) for i, c in sorted(g.items())) / tot
            out = gm if out is None else out + gm
        return out / len(self.groups)

    def val_probs(self, pool: ModelPool) -> np.ndarray:
        return self.combine({i: pool.members[i].val_probs for i in self.member_ids()})

    @property
    def num_classes(self) -> int:
        return next(iter(self.models.values())).num_classes

    def predict_proba(self, patches: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        return ensemble_predict(self, patches, temperature)


def ensemble_predict(ensemble: Ensemble, patches: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    missing = [i for i in ensemble.member_ids() if i not in ensemble.models]
    if missing:
        raise ValidationError(f"ensemble_predict: members {missing} have no loaded model")
    probs = {i: ensemble.models[i].predict_proba(patches, temperature=temperature)
             for i in ensemble.member_ids()}
    return ensemble.combine(probs)


@dataclass(frozen=True)
class SelectionConfig:
    n_init: int = 2
    m_subsets: int = 5
    repeats: int = 10
    seed: int = 0
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if self.n_init < 1 or self.m_subsets < 1 or self.repeats < 1:
            raise ValidationError("N, M and repeats must all be >= 1")
        if self.cap < self.n_init:
            raise ValidationError("size cap must be >= N")


def half_size(pool_size: int) -> int:
    return max(1, pool_size // 2)


def select_ensemble(pool: ModelPool, config: SelectionConfig) -> Ensemble:
    """M half-size random subsets, forward selection on each, mean of the M ensembles.

    With ``repeats > 1`` the whole procedure is repeated on fresh subsets and
    the aggregate with the best validation F_avg is kept (earliest on ties).
    """
    if len(pool) < 2:
        raise ValidationError(f"select_ensemble: pool needs >= 2 members, has {len(pool)}")
    h = half_size(len(pool))
    if config.n_init > h:
        raise ValidationError(f"select_ensemble: N={config.n_init} exceeds the subset size {h}")
    root = RngStream(config.seed, SELECT_STREAM)
    best: Optional[Ensemble] = None
    for r in range(config.repeats):
        groups, traces = [], []
        for m in range(config.m_subsets):
            subset = root.child(r, m).choice(len(pool), size=h, replace=False)
            sel = forward_select(pool, subset, config.n_init, config.cap)
            groups.append(sel.counts)
            traces.append(sel.trace)
        ens = Ensemble(groups, traces=traces)
        ens.val_favg = _score(ens.val_probs(pool), pool.val_labels, pool.num_classes)
        if best is None or ens.val_favg > best.val_favg:
            best = ens
    best.models = {i: pool.members[i].model for i in best.member_ids() if pool.members[i].model is not None}
    return best


@dataclass
class GridResult:
    cells: dict  # (N, M) -> Ensemble
    procedures: int

    def best(self) -> tuple:
        """``((N, M), ensemble)`` with the highest validation F_avg; ties to the smallest (N, M)."""
        return max(sorted(self.cells.items()), key=lambda kv: kv[1].val_favg)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "M", "val_favg", "size"])
        for (n, m), e in sorted(self.cells.items()):
            w.writerow([n, m, repr(e.val_favg), sum(sum(g.values()) for g in e.groups)])
        return buf.getvalue()


def grid_search(pool: ModelPool, ns: Sequence[int], ms: Sequence[int], repeats: int = 10, seed: int = 0,
                cap: int = DEFAULT_CAP) -> GridResult:
    """Run ``select_ensemble`` on every (N, M) cell; cells with N above the subset size are skipped."""
    h = half_size(len(pool))
    cells, procedures = {}, 0
    for n in ns:
        if n > h:
            log.warning("grid: N=%d exceeds subset size %d, skipped", n, h)
            continue
        for m in ms:
            cells[(n, m)] = select_ensemble(pool, SelectionConfig(n, m, repeats, seed, cap))
            procedures += repeats
    if not cells:
        raise ValidationError("grid_search: no valid (N, M) cell")
    return GridResult(cells, procedures)


# ---------------------------------------------------------------- baselines

def bootstrap_indices(n: int, rng: RngStream) -> np.ndarray:
    """``n`` draws with replacement from ``range(n)``."""
    return rng.integers(0, n, size=n)


def bagging_baseline(train, val, count: int, spec: ArchitectureSpec, config: TrainConfig,
                     seed: int = 0) -> Ensemble:
    """``count`` scratch models, each fit on a bootstrap resample of the training split, averaged."""
    from .transfer import init_rng
    if count < 1:
        raise ValidationError("bagging needs count >= 1")
    if count == 1:
        warnings.warn("bagging with count=1 is a single model, not an ensemble", stacklevel=2)
    tr = train.subset("train") if train.splits is not None else train
    vl = val.subset("val") if val.splits is not None else val
    root = RngStream(seed, BAG_STREAM)
    models = {}
    for i in range(count):
        idx = bootstrap_indices(len(tr), root.child(i))
        s = seed + i
        res = fit(build_model(spec_with_classes(spec, tr.num_classes), init_rng(s), lineage="bagged"),
                  (tr.patches[idx], tr.labels[idx]), vl, config.with_seed(s))
        models[i] = res.model
    ens = Ensemble([{i: 1 for i in models}], models)
    ens.val_favg = _score(ens.predict_proba(vl.patches), vl.labels, vl.num_classes)
    return ens


def random_pool_ensemble(pool: ModelPool, config: SelectionConfig) -> Ensemble:
    """Ablation: selection restricted to the scratch-trained members of ``pool``.

    Member ids in the result refer to the restricted pool.
    """
    sub = pool.with_lineage("scratch")
    sub = ModelPool([PoolMember(j, m.model, m.lineage, m.val_probs, m.val_favg) for j, m in enumerate(sub.members)],
                    sub.val_labels, sub.num_classes)
    return select_ensemble(sub, config)


# ---------------------------------------------------------------- files

def selection_log_csv(ensemble: Ensemble) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subset", "step", "member_id", "val_favg"])
    for g, trace in enumerate(ensemble.traces):
        for step, member, score in trace:
            w.writerow([g, step, member, repr(float(score))])
    return buf.getvalue()


def write_manifest(ensemble: Ensemble, paths: dict, path) -> Path:
    """Text manifest, one ``checkpoint<TAB>multiplicity<TAB>subset`` line per group entry."""
    lines = ["# checkpoint\tmultiplicity\tsubset"]
    for g, group in enumerate(ensemble.groups):
        for i, c in sorted(group.items()):
            lines.append(f"{paths[i]}\t{c}\t{g}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> Ensemble:
    """Load an ensemble manifest; relative checkpoint paths resolve against its directory."""
    path = Path(path)
    groups: dict = {}
    ids: dict = {}
    models = {}
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"{path}:{ln}: expected 3 tab-separated fields, got {len(parts)}")
        ckpt, mult, g = parts[0], int(parts[1]), int(parts[2])
        if ckpt not in ids:
            ids[ckpt] = len(ids)
            p = Path(ckpt)
            models[ids[ckpt]] = load_checkpoint(p if p.is_absolute() else path.parent / p)
        groups.setdefault(g, {})[ids[ckpt]] = mult
    return Ensemble([groups[g] for g in sorted(groups)], models)
