"""Layer-wise weight transfer from a pretrained network and the depth sweep."""
from __future__ import annotations

import csv
import io
import logging
import statistics
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import ShapeError, TrainingError, ValidationError
from .metrics import confusion, f_avg
from .model import LAYER_NAMES, ArchitectureSpec, Model, build_model, spec_with_classes
from .optim import FitResult, TrainConfig, fit
from .tensor import RngStream

log = logging.getLogger(__name__)

INIT_STREAM = 31
MAX_TRANSFER = len(LAYER_NAMES) - 1  # the classifier is never transferred


def check_compatible(source: ArchitectureSpec, target: ArchitectureSpec, n: int) -> None:
    """Raise ShapeError naming the first of the leading ``n`` layers whose shapes differ."""
    for (name, ws, bs), (_, wt, bt) in zip(source.layer_shapes()[:n], target.layer_shapes()[:n]):
        if ws != wt or bs != bt:
            raise ShapeError(f"architecture mismatch at layer {name}: source weight {ws} vs target {wt}")
    if n and source.leaky_alpha != target.leaky_alpha:
        raise ShapeError(f"architecture mismatch at layer {LAYER_NAMES[0]}: leaky alpha "
                         f"{source.leaky_alpha} vs {target.leaky_alpha}")


def transfer_layers(source: Model, n: int, target_classes: int, rng: RngStream,
                    target_spec: Optional[ArchitectureSpec] = None, freeze: bool = False) -> Model:
    """Fresh target model whose first ``n`` layers are copied from ``source``.

    Every layer is first drawn from the initializer exactly as
    ``build_model`` would, then layers 1..n are overwritten, so ``n=0`` is
    the scratch model for the same ``rng``. With ``freeze`` the copied layers
    are excluded from optimizer updates.
    """
    if not 0 <= n <= MAX_TRANSFER:
        raise ValidationError(f"transfer depth must lie in 0..{MAX_TRANSFER}, got {n}")
    spec = spec_with_classes(target_spec or source.spec, target_classes)
    check_compatible(source.spec, spec, n)
    src_lineage = source.meta.get("lineage", "?")
    model = build_model(spec, rng, lineage="scratch" if n == 0 else f"transfer{n}<{src_lineage}")
    for name in LAYER_NAMES[:n]:
        for part in ("weight", "bias"):
            key = f"{name}.{part}"
            model.params[key].data = source.params[key].data.astype(model.params[key].dtype, copy=True)
    if freeze:
        model.frozen = frozenset(LAYER_NAMES[:n])
    return model


@dataclass(frozen=True)
class TransferPlan:
    depths: tuple = tuple(range(1, MAX_TRANSFER + 1))
    repetitions: int = 3
    base_seed: int = 0
    config: TrainConfig = field(default_factory=TrainConfig)
    freeze: bool = False

    def __post_init__(self):
        bad = [n for n in self.depths if not 1 <= n <= MAX_TRANSFER]
        if bad:
            raise ValidationError(f"transfer depths must lie in 1..{MAX_TRANSFER}, got {bad}")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")

    def seeds(self) -> list[int]:
        return [self.base_seed + r for r in range(self.repetitions)]


@dataclass
class SweepRun:
    source: str
    n: int
    seed: int
    val_favg: float
    test_favg: float
    result: Optional[FitResult] = None


@dataclass
class SweepReport:
    runs: list = field(default_factory=list)

    def scratch(self) -> list[SweepRun]:
        return [r for r in self.runs if r.n == 0]

    def cells(self) -> dict:
        """``(source, n) -> [runs]`` in insertion order."""
        out: dict = {}
        for r in self.runs:
            out.setdefault((r.source, r.n), []).append(r)
        return out

    def mean_test(self, source: str, n: int) -> float:
        return statistics.fmean(r.test_favg for r in self.cells()[(source, n)])

    def scratch_mean(self) -> float:
        return statistics.fmean(r.test_favg for r in self.scratch())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "n", "seed", "val_favg", "test_favg"])
        for r in self.runs:
            w.writerow([r.source, r.n, r.seed, repr(r.val_favg), repr(r.test_favg)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "n", "runs", "mean_val_favg", "mean_test_favg"])
        for (src, n), runs in self.cells().items():
            w.writerow([src, n, len(runs), repr(statistics.fmean(r.val_favg for r in runs)),
                        repr(statistics.fmean(r.test_favg for r in runs))])
        return buf.getvalue()

    def table(self) -> str:
        """Text grid: one row per source, one column per depth, scratch mean below."""
        cells = self.cells()
        sources = [s for s in dict.fromkeys(src for src, n in cells) if s != "scratch"]
        depths = sorted({n for _, n in cells if n > 0})
        lines = ["source".ljust(20) + "".join(f"n={n}".rjust(9) for n in depths)]
        for s in sources:
            row = "".join((f"{self.mean_test(s, n):9.4f}" if (s, n) in cells else " " * 9) for n in depths)
            lines.append(s.ljust(20) + row)
        if self.scratch():
            lines.append(f"scratch baseline: {self.scratch_mean():.4f}")
        return "\n".join(lines)


def _test_favg(model: Model, test) -> float:
    probs = model.predict_proba(test.patches)
    return f_avg(confusion(probs.argmax(axis=1), test.labels, model.num_classes))


def init_rng(seed: int) -> RngStream:
    return RngStream(seed, INIT_STREAM)


def depth_sweep(sources: dict, target, plan: TransferPlan, spec: Optional[ArchitectureSpec] = None,
                keep_models: bool = False, on_run: Optional[Callable] = None) -> SweepReport:
    """Fine-tune ``plan.repetitions`` models per (source, depth) plus a scratch baseline.

    ``sources`` maps a source name to its pretrained model; ``target`` is a
    PatchSet with train/val/test split tags. Repetition ``r`` uses seed
    ``plan.base_seed + r`` for both initialization and training, shared by
    the scratch baseline, so each repetition differs from scratch only in
    the transferred layers.
    """
    train, val, test = target.subset("train"), target.subset("val"), target.subset("test")
    k = target.num_classes
    report = SweepReport()
    cells = [("scratch", 0)] + [(name, n) for name in sources for n in plan.depths]
    for name, n in cells:
        for seed in plan.seeds():
            if n == 0:
                base = spec or next(iter(sources.values())).spec
                model = build_model(spec_with_classes(base, k), init_rng(seed))
            else:
                model = transfer_layers(sources[name], n, k, init_rng(seed), target_spec=spec, freeze=plan.freeze)
            try:
                res = fit(model, train, val, plan.config.with_seed(seed))
            except TrainingError as e:
                raise TrainingError(f"transfer sweep source={name} n={n} seed={seed}: {e}") from e
            run = SweepRun(name, n, seed, res.history.best_score, _test_favg(res.model, test),
                           res if keep_models else None)
            log.info("sweep %s n=%d seed=%d val=%.4f test=%.4f", name, n, seed, run.val_favg, run.test_favg)
            report.runs.append(run)
            if on_run is not None:
                on_run(run)
    return report
