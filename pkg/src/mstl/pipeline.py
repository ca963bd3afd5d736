"""Pipeline stages driven by a manifest, writing artifacts into one run directory.

Every stage regenerates (or reloads) its inputs deterministically from the
manifest and seed, so the stages can run as separate CLI invocations or in
one process. Derived training seeds are fixed offsets of the manifest seed.
"""
from __future__ import annotations

import csv
import io
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as D
from .distill import agreement, distill_train, make_soft_targets, write_soft_targets
from .ensemble import (Ensemble, SelectionConfig, bagging_baseline, build_pool, grid_search, random_pool_ensemble,
                       read_manifest, select_ensemble, selection_log_csv, write_manifest)
from .errors import ValidationError
from .manifest import Manifest
from .metrics import confusion, f_avg
from .model import Model, build_model, load_checkpoint, save_checkpoint
from .mtl import mtl_finetune, mtl_train
from .optim import fit
from .tensor import RngStream
from .textures import default_task, hard_target_task, source_tasks, synth_texture_task
from .transfer import TransferPlan, depth_sweep, init_rng

log = logging.getLogger(__name__)

PRETRAIN_SEED = 100
SCRATCH_POOL_SEED = 1000
STUDENT_SEED = 2000
MTL_SEED = 3000
BAG_SEED = 4000
DATA_STREAM = 61

METHOD_ORDER = ("scratch", "transfer", "mtl", "mtl+finetune", "bagging", "random-pool ensemble",
                "ensemble", "distilled")


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    return path


def favg_of(model_or_ens, ps) -> float:
    probs = model_or_ens.predict_proba(ps.patches)
    return f_avg(confusion(probs.argmax(axis=1), ps.labels, ps.num_classes))


def metrics_row_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "val_favg", "test_favg"])
    for method, val, test in rows:
        w.writerow([method, repr(float(val)), repr(float(test))])
    return buf.getvalue()


@dataclass
class Run:
    manifest: Manifest
    out: Path
    _cache: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out = Path(self.out)

    @property
    def seed(self) -> int:
        return self.manifest.seed

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    # ------------------------------------------------------------ data
    def target(self) -> D.PatchSet:
        """Target PatchSet with train/val/test tags, training split augmented and balanced."""
        if "target" in self._cache:
            return self._cache["target"]
        sec = self.manifest.data.target
        rng = RngStream(self.seed, DATA_STREAM)
        if sec.path:
            ps = D.read_patchset(sec.path)
            if ps.splits is None:
                ps = D.make_splits(ps, sec.val_per_class, sec.test_per_class, rng.child(0))
        else:
            make = hard_target_task if sec.preset == "hard7" else default_task
            ps = synth_texture_task(make(self.seed, sec.train_per_class, sec.val_per_class, sec.test_per_class))
        if self.manifest.data.augment:
            ps = D.augment_d4(ps)
        if self.manifest.data.balance:
            ps = D.balance_classes(ps, rng.child(1))
        self._cache["target"] = ps
        return ps

    def sources(self) -> list[tuple[str, D.PatchSet]]:
        if "sources" in self._cache:
            return self._cache["sources"]
        sec = self.manifest.data.sources
        out = []
        if sec.preset:
            for spec in source_tasks(self.seed, sec.train_per_class, sec.val_per_class):
                out.append((spec.name, synth_texture_task(spec)))
        for p in sec.paths:
            ps = D.read_patchset(p)
            if ps.splits is None:
                raise ValidationError(f"source PatchSet {p} needs train/val split tags")
            out.append((Path(p).stem, ps))
        if not out:
            raise ValidationError("no source tasks configured")
        self._cache["sources"] = out
        return out

    def spec(self, num_classes: int):
        return self.manifest.architecture.spec(num_classes)

    def split(self, name: str) -> D.PatchSet:
        return self.target().subset(name)

    def record(self, method: str, model, extra: Optional[list] = None) -> tuple:
        row = (method, favg_of(model, self.split("val")), favg_of(model, self.split("test")))
        rows = [row] + (extra or [])
        _write(self.path(f"metrics_{method.replace('+', '_').replace(' ', '_')}.csv"), metrics_row_csv(rows))
        return row

    # ------------------------------------------------------------ stages
    def synth_data(self) -> list[Path]:
        paths = [D.write_patchset(self.target(), self._mk("data", "target.pset"))]
        for name, ps in self.sources():
            paths.append(D.write_patchset(ps, self._mk("data", f"source_{name}.pset")))
        return paths

    def _mk(self, *parts: str) -> Path:
        p = self.path(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def train_scratch(self) -> Model:
        ps = self.target()
        m = build_model(self.spec(ps.num_classes), init_rng(self.seed))
        res = fit(m, ps, ps, self.manifest.train.config(self.seed))
        save_checkpoint(res.model, self._mk("checkpoints", "scratch.ckpt"))
        _write(self.path("history_scratch.csv"), res.history.to_csv())
        self.record("scratch", res.model)
        return res.model

    def pretrain(self) -> dict:
        models = {}
        cfg = self.manifest.transfer.pretrain
        for i, (name, ps) in enumerate(self.sources()):
            seed = self.seed + PRETRAIN_SEED + i
            m = build_model(self.spec(ps.num_classes), init_rng(seed), lineage=f"pretrained:{name}")
            res = fit(m, ps, ps, cfg.config(seed))
            res.model.meta["lineage"] = f"pretrained:{name}"
            save_checkpoint(res.model, self._mk("checkpoints", f"pretrained_{name}.ckpt"))
            _write(self.path(f"history_pretrain_{name}.csv"), res.history.to_csv())
            models[name] = res.model
        return models

    def pretrained(self) -> dict:
        names = [n for n, _ in self.sources()]
        paths = {n: self.path("checkpoints", f"pretrained_{n}.ckpt") for n in names}
        if all(p.exists() for p in paths.values()):
            return {n: load_checkpoint(p) for n, p in paths.items()}
        return self.pretrain()

    def transfer_sweep(self):
        sec = self.manifest.transfer
        plan = TransferPlan(tuple(sec.depths), sec.repetitions, self.seed, self.manifest.train.config(self.seed),
                            sec.freeze)
        target = self.target()
        report = depth_sweep(self.pretrained(), target, plan, spec=self.spec(target.num_classes), keep_models=True)
        _write(self.path("sweep.csv"), report.to_csv())
        _write(self.path("sweep_summary.csv"), report.summary_csv())
        _write(self.path("sweep_table.txt"), report.table() + "\n")
        for r in report.runs:
            stem = f"{r.source}_n{r.n}_s{r.seed}"
            save_checkpoint(r.result.model, self._mk("pool", f"{stem}_final.ckpt"))
            for snap in r.result.snapshots:
                m = r.result.model.copy(epoch=snap.epoch, val_score=snap.val_score,
                                        lineage=f"snapshot{snap.epoch}<{r.result.model.meta['lineage']}")
                m.load_state(snap.state)
                save_checkpoint(m, self._mk("pool", f"{stem}_snap{snap.epoch:04d}.ckpt"))
        scratch = report.scratch()
        _write(self.path("metrics_scratch.csv"), metrics_row_csv(
            [("scratch", statistics.fmean(r.val_favg for r in scratch), report.scratch_mean())]))
        cells = [c for c in report.cells() if c[1] > 0]
        best = max(cells, key=lambda c: (statistics.fmean(r.val_favg for r in report.cells()[c]), -c[1]))
        runs = report.cells()[best]
        _write(self.path("metrics_transfer.csv"), metrics_row_csv(
            [("transfer", statistics.fmean(r.val_favg for r in runs), report.mean_test(*best))]))
        return report

    def ensemble_select(self) -> Ensemble:
        sec = self.manifest.ensemble
        target = self.target()
        pool_dir = self.path("pool")
        files = sorted(pool_dir.glob("*.ckpt")) if pool_dir.exists() else []
        if not files:
            self.transfer_sweep()
            files = sorted(pool_dir.glob("*.ckpt"))
        models = [load_checkpoint(p) for p in files]
        paths = [str(p.relative_to(self.out)) for p in files]
        spec = self.spec(target.num_classes)
        cfg = self.manifest.train.config(self.seed)
        pool = build_pool(models, target, sec.n_scratch, target, spec, cfg, self.seed + SCRATCH_POOL_SEED)
        for j, member in enumerate(pool.members[len(models):]):
            p = save_checkpoint(member.model, self._mk("pool", f"extra_scratch_{j:02d}.ckpt"))
            paths.append(str(p.relative_to(self.out)))
        pool_csv = io.StringIO()
        w = csv.writer(pool_csv, lineterminator="\n")
        w.writerow(["member_id", "checkpoint", "lineage", "val_favg"])
        for m in pool.members:
            w.writerow([m.id, paths[m.id], m.lineage, repr(m.val_favg)])
        _write(self.path("pool.csv"), pool_csv.getvalue())

        scfg = SelectionConfig(sec.N, sec.M, sec.repeats, self.seed, sec.cap)
        if sec.grid:
            grid = grid_search(pool, sec.grid_N, sec.grid_M, sec.repeats, self.seed, sec.cap)
            _write(self.path("grid.csv"), grid.to_csv())
            (n, m), ens = grid.best()
            log.info("grid best N=%d M=%d val=%.4f", n, m, ens.val_favg)
        else:
            ens = select_ensemble(pool, scfg)
        write_manifest(ens, {i: paths[i] for i in ens.member_ids()}, self._mk("ensemble.manifest"))
        _write(self.path("selection_log.csv"), selection_log_csv(ens))
        best_single = max(m.val_favg for m in pool.members)
        self.record("ensemble", ens)
        _write(self.path("ensemble_summary.csv"), "pool_size,best_single_val_favg,ensemble_val_favg\n"
               f"{len(pool)},{best_single!r},{ens.val_favg!r}\n")
        if sec.random_pool and len(pool.with_lineage("scratch")) >= 2:
            self.record("random-pool ensemble", random_pool_ensemble(pool, scfg))
        if sec.bagging:
            bag = bagging_baseline(target, target, sec.bagging, spec, cfg, self.seed + BAG_SEED)
            self.record("bagging", bag)
        return ens

    def ensemble(self) -> Ensemble:
        p = self.path("ensemble.manifest")
        return read_manifest(p) if p.exists() else self.ensemble_select()

    def distill(self) -> Model:
        target = self.target()
        teacher = self.ensemble()
        soft = make_soft_targets(teacher, target, self.manifest.distill.temperature, "ensemble.manifest")
        write_soft_targets(soft, self._mk("soft_targets.soft"))
        seed = self.seed + STUDENT_SEED
        student = build_model(self.spec(target.num_classes), init_rng(seed))
        res = distill_train(student, soft, target, target, self.manifest.distill_train().config(seed))
        save_checkpoint(res.model, self._mk("checkpoints", "student.ckpt"))
        _write(self.path("history_distill.csv"), res.history.to_csv())
        agree = agreement(res.model, teacher, self.split("train"))
        _write(self.path("agreement.csv"), f"split,agreement\ntrain,{agree!r}\n")
        self.record("distilled", res.model)
        return res.model

    def mtl(self) -> Model:
        target = self.target()
        seed = self.seed + MTL_SEED
        res = mtl_train(("target", target), self.sources(), self.spec(target.num_classes),
                        self.manifest.mtl_train().config(seed))
        _write(self.path("schedule_log.csv"), res.schedule_csv())
        raw = res.model.extract("target")
        save_checkpoint(raw, self._mk("checkpoints", "mtl.ckpt"))
        self.record("mtl", raw)
        ft = mtl_finetune(res.model, "target", target, self.manifest.mtl_finetune().config(seed))
        save_checkpoint(ft.model, self._mk("checkpoints", "mtl_finetuned.ckpt"))
        _write(self.path("history_mtl_finetune.csv"), ft.history.to_csv())
        self.record("mtl+finetune", ft.model)
        return ft.model

    def run_all(self) -> dict:
        """Every stage in order; returns the report rows by method."""
        self.pretrain()
        self.transfer_sweep()
        self.ensemble_select()
        self.distill()
        if self.manifest.mtl.enabled:
            self.mtl()
        return self.report()

    def report(self) -> dict:
        return write_report(self.out)


def read_metrics(out: Path) -> dict:
    rows = {}
    for p in sorted(Path(out).glob("metrics_*.csv")):
        with open(p, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                rows[r["method"]] = (float(r["val_favg"]), float(r["test_favg"]))
    return rows


def write_report(out: Path) -> dict:
    """Collect every metrics file into report.csv and a text table, one row per method."""
    rows = read_metrics(out)
    if not rows:
        raise ValidationError(f"no metrics_*.csv files under {out}")
    order = [m for m in METHOD_ORDER if m in rows] + sorted(m for m in rows if m not in METHOD_ORDER)
    _write(Path(out) / "report.csv", metrics_row_csv([(m, *rows[m]) for m in order]))
    width = max(len(m) for m in order) + 2
    lines = ["method".ljust(width) + "val F_avg".rjust(10) + "test F_avg".rjust(12)]
    lines += [m.ljust(width) + f"{rows[m][0]:10.4f}{rows[m][1]:12.4f}" for m in order]
    _write(Path(out) / "report.txt", "\n".join(lines) + "\n")
    return {m: rows[m] for m in order}


def evaluate_artifact(model_or_ens, ps: D.PatchSet) -> tuple[float, np.ndarray]:
    probs = model_or_ens.predict_proba(ps.patches)
    cm = confusion(probs.argmax(axis=1), ps.labels, ps.num_classes)
    return f_avg(cm), cm

