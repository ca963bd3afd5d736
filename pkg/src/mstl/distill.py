"""Teacher soft targets and student training against them."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import FormatError, ShapeError, TruncatedError, ValidationError
from .optim import FitResult, TrainConfig, _as_arrays, train_loop

SOFT_MAGIC = b"SOFT"
SOFT_VERSION = 1
_HEAD = struct.Struct("<4sHIH")


@dataclass
class SoftTargetSet:
    probs: np.ndarray  # (rows, classes) float32
    teacher: str = ""
    temperature: float = 1.0

    def __post_init__(self):
        self.probs = np.ascontiguousarray(self.probs, dtype=np.float32)
        if self.probs.ndim != 2:
            raise ShapeError(f"soft targets must be a matrix, got shape {self.probs.shape}")
        if np.any(self.probs < 0) or np.abs(self.probs.sum(axis=1) - 1.0).max(initial=0.0) > 1e-5:
            raise ValidationError("soft-target rows must be non-negative and sum to 1 within 1e-5")

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


def make_soft_targets(teacher, train, temperature: float = 1.0, teacher_id: str = "") -> SoftTargetSet:
    """Teacher probabilities for every training patch.

    ``teacher`` is a Model or an Ensemble; an ensemble averages its members'
    probabilities, each computed from logits divided by ``temperature``.
    ``train`` is a PatchSet (its train split when tagged) or a patch array.
    """
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    if hasattr(train, "patches"):
        if train.splits is not None:
            train = train.subset("train")
        if train.num_classes != teacher.num_classes:
            raise ValidationError(f"teacher has {teacher.num_classes} classes, data has {train.num_classes}")
        patches = train.patches
    else:
        patches = np.asarray(train)
    p = teacher.predict_proba(patches, temperature=temperature)
    return SoftTargetSet(p, teacher_id, float(temperature))


def distill_train(student, soft: SoftTargetSet, train_inputs, val, config: TrainConfig,
                  on_epoch: Optional[Callable] = None) -> FitResult:
    """Train ``student`` with cross-entropy against the soft targets only.

    Early stopping and model choice follow hard-label validation F_avg.
    """
    if student.num_classes != soft.num_classes:
        raise ValidationError(f"student has {student.num_classes} classes, soft targets {soft.num_classes}")
    if hasattr(train_inputs, "patches"):
        x = train_inputs.subset("train").patches if train_inputs.splits is not None else train_inputs.patches
    else:
        x = np.asarray(train_inputs)
    if len(x) != len(soft):
        raise ShapeError(f"{len(x)} training patches but {len(soft)} soft-target rows")
    x_va, y_va = _as_arrays(val, "val")
    res = train_loop(student, x, soft.probs, x_va, y_va, config, on_epoch, tag="distill")
    res.model.meta["lineage"] = "distilled"
    return res


def agreement(a, b, patches) -> float:
    """Fraction of patches on which ``a`` and ``b`` predict the same class."""
    if hasattr(patches, "patches"):
        patches = patches.patches
    if a.num_classes != b.num_classes:
        raise ValidationError(f"agreement: class counts differ ({a.num_classes} vs {b.num_classes})")
    pa = a.predict_proba(patches).argmax(axis=1)
    pb = b.predict_proba(patches).argmax(axis=1)
    return float(np.mean(pa == pb)) if len(pa) else 1.0


# ---------------------------------------------------------------- file format

def soft_bytes(soft: SoftTargetSet) -> bytes:
    trailer = f"teacher={soft.teacher}\ntemperature={soft.temperature!r}\n".encode("utf-8")
    rows, k = soft.probs.shape
    return (_HEAD.pack(SOFT_MAGIC, SOFT_VERSION, rows, k) + soft.probs.astype("<f4").tobytes()
            + trailer)


def write_soft_targets(soft: SoftTargetSet, path) -> Path:
    path = Path(path)
    path.write_bytes(soft_bytes(soft))
    return path


def parse_soft_targets(raw: bytes, source: str = "<bytes>") -> SoftTargetSet:
    if len(raw) < _HEAD.size:
        raise TruncatedError(f"{source}: soft-target header truncated")
    magic, version, rows, k = _HEAD.unpack_from(raw)
    if magic != SOFT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {SOFT_MAGIC!r}")
    if version != SOFT_VERSION:
        raise FormatError(f"{source}: unsupported soft-target version {version}")
    end = _HEAD.size + 4 * rows * k
    if len(raw) < end:
        raise TruncatedError(f"{source}: matrix truncated ({len(raw) - _HEAD.size} of {4 * rows * k} bytes)")
    probs = np.frombuffer(raw, dtype="<f4", count=rows * k, offset=_HEAD.size).reshape(rows, k)
    fields = {}
    for line in raw[end:].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        fields[key] = value
    return SoftTargetSet(probs.astype(np.float32), fields.get("teacher", ""),
                         float(fields.get("temperature", "1.0")))


def read_soft_targets(path) -> SoftTargetSet:
    path = Path(path)
    return parse_soft_targets(path.read_bytes(), str(path))
