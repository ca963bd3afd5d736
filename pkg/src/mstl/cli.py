"""Command-line entry point: ``mstl <subcommand> [--manifest M] [--seed S] [--out DIR] [--threads N]``.

Pipeline subcommands read an experiment manifest (JSON), copy it verbatim
into the run directory and write their artifacts there. Progress goes to
standard error; metrics go to CSV files.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from . import errors as E

log = logging.getLogger("mstl")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MANIFEST = 3
EXIT_MISSING = 4
EXIT_FORMAT = 5
EXIT_TRAINING = 6
EXIT_LOCKED = 7
EXIT_INVALID = 8

PIPELINE = ("synth-data", "train", "pretrain", "transfer-sweep", "ensemble-select", "distill", "mtl", "run")
LOCK_NAME = ".lock"
MANIFEST_COPY = "manifest.json"


class UsageError(Exception):
    pass


class LockedError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--manifest", type=Path, help="experiment manifest (JSON)")
    common.add_argument("--seed", type=int, help="global seed, overrides the manifest")
    common.add_argument("--out", type=Path, help="run directory, overrides the manifest")
    common.add_argument("--threads", type=int, help="BLAS threads (default: $MSTL_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = _Parser(prog="mstl", description="Multi-source transfer learning for texture patch CNNs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth-data": "generate the synthetic target and source PatchSets",
        "train": "train a model from scratch on the target task",
        "pretrain": "train one model per source task",
        "transfer-sweep": "fine-tune from each source at each transfer depth",
        "ensemble-select": "build the model pool and select the ensemble",
        "distill": "train a student on the ensemble's soft targets",
        "mtl": "multi-task training followed by target fine-tuning",
        "run": "every pipeline stage in order, then the report",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)

    ing = sub.add_parser("ingest", parents=[common], help="cut labelled patches from a PGM image and mask")
    ing.add_argument("--image", type=Path, required=True)
    ing.add_argument("--mask", type=Path)
    ing.add_argument("--label", type=int, required=True)
    ing.add_argument("--classes", required=True, help="comma-separated class names")
    ing.add_argument("--mode", choices=("hu", "scale"), default="hu")
    ing.add_argument("--append", type=Path, help="existing PatchSet to extend")
    ing.add_argument("--name", default="ingested.pset", help="output file name inside --out")

    ev = sub.add_parser("eval", parents=[common], help="F_avg and confusion of a checkpoint or ensemble")
    src = ev.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--ensemble", type=Path)
    ev.add_argument("--data", type=Path, required=True, help="PatchSet file")
    ev.add_argument("--split", choices=("train", "val", "test", "all"), default="all")

    sub.add_parser("report", parents=[common], help="collect metrics CSVs into a comparison table")
    return p


def set_threads(n) -> None:
    if n is None:
        env = os.environ.get("MSTL_THREADS")
        n = int(env) if env else os.cpu_count() or 1
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    threadpool_limits(n)


@contextlib.contextmanager
def run_lock(out: Path):
    """Exclusive ownership of a run directory for the life of the block."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"run directory {out} is locked by another process ({lock}); "
                          "remove the lock file if that process is gone") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_manifest(args):
    from .manifest import Manifest, load_manifest
    if args.manifest is not None:
        if not args.manifest.exists():
            raise FileNotFoundError(f"manifest not found: {args.manifest}")
        m = load_manifest(args.manifest)
    else:
        m = Manifest()
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        m = m.with_seed(args.seed)
    return m


def _out_dir(args, manifest) -> Path:
    if args.out is not None:
        return args.out
    if manifest is not None and manifest.output:
        return Path(manifest.output)
    raise UsageError("no output directory: pass --out or set 'output' in the manifest")


def _copy_manifest(args, out: Path) -> None:
    if args.manifest is None:
        return
    text = args.manifest.read_bytes()
    dest = out / MANIFEST_COPY
    if dest.exists() and dest.read_bytes() != text:
        raise E.ManifestError(f"{out} already holds a different manifest; use a fresh run directory")
    dest.write_bytes(text)


def _pipeline(args) -> int:
    from .pipeline import Run
    manifest = _load_manifest(args)
    out = _out_dir(args, manifest)
    with run_lock(out):
        _copy_manifest(args, out)
        run = Run(manifest, out)
        stage = {
            "synth-data": run.synth_data,
            "train": run.train_scratch,
            "pretrain": run.pretrain,
            "transfer-sweep": run.transfer_sweep,
            "ensemble-select": run.ensemble_select,
            "distill": run.distill,
            "mtl": run.mtl,
            "run": run.run_all,
        }[args.command]
        stage()
        if args.command == "run":
            print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _ingest(args) -> int:
    from . import data as D
    out = args.out
    if out is None:
        raise UsageError("ingest needs --out")
    for p in (args.image, args.mask, args.append):
        if p is not None and not p.exists():
            raise FileNotFoundError(f"input not found: {p}")
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if not 0 <= args.label < len(classes):
        raise E.ValidationError(f"--label {args.label} outside the {len(classes)} given classes")
    with run_lock(out):
        ps = D.ingest_pgm(args.image, args.mask, args.label, classes, mode=args.mode)
        if args.append is not None:
            ps = D.concat([D.read_patchset(args.append), ps])
        dest = D.write_patchset(ps, out / args.name)
    print(f"{dest}: {len(ps)} patches, class counts {ps.class_counts().tolist()}")
    return EXIT_OK


def _eval(args) -> int:
    from . import data as D
    from .ensemble import read_manifest
    from .metrics import confusion_csv, render_confusion
    from .model import load_checkpoint
    from .pipeline import evaluate_artifact
    for p in (args.checkpoint, args.ensemble, args.data):
        if p is not None and not p.exists():
            raise FileNotFoundError(f"input not found: {p}")
    ps = D.read_patchset(args.data)
    if args.split != "all":
        if ps.splits is None:
            raise E.ValidationError(f"{args.data} has no split tags; use --split all")
        ps = ps.subset(args.split)
    artifact = load_checkpoint(args.checkpoint) if args.checkpoint else read_manifest(args.ensemble)
    if artifact.num_classes != ps.num_classes:
        raise E.ValidationError(f"artifact predicts {artifact.num_classes} classes, data has {ps.num_classes}")
    score, cm = evaluate_artifact(artifact, ps)
    print(f"F_avg {score!r}")
    print(render_confusion(cm, ps.class_names))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        name = (args.checkpoint or args.ensemble).stem
        (args.out / f"eval_{name}_{args.split}.csv").write_text(
            f"f_avg\n{score!r}\n", encoding="utf-8")
        (args.out / f"confusion_{name}_{args.split}.csv").write_text(
            confusion_csv(cm, ps.class_names), encoding="utf-8")
    return EXIT_OK


def _report(args) -> int:
    from .pipeline import write_report
    manifest = _load_manifest(args) if args.manifest else None
    out = _out_dir(args, manifest)
    if not out.exists():
        raise FileNotFoundError(f"run directory not found: {out}")
    write_report(out)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        set_threads(args.threads)
        if args.command in PIPELINE:
            return _pipeline(args)
        return {"ingest": _ingest, "eval": _eval, "report": _report}[args.command](args)
    except UsageError as e:
        code, kind, msg = EXIT_USAGE, "usage", e
    except E.ManifestError as e:
        code, kind, msg = EXIT_MANIFEST, "manifest", e
    except FileNotFoundError as e:
        code, kind, msg = EXIT_MISSING, "missing-file", e
    except E.FormatError as e:
        code, kind, msg = EXIT_FORMAT, "format", e
    except E.TrainingError as e:
        code, kind, msg = EXIT_TRAINING, "training", e
    except LockedError as e:
        code, kind, msg = EXIT_LOCKED, "locked", e
    except (E.ValidationError, E.ShapeError) as e:
        code, kind, msg = EXIT_INVALID, "invalid-input", e
    except E.MstlError as e:
        code, kind, msg = EXIT_ERROR, "error", e
    print(f"error[{kind}]: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
