"""Experiment manifests: a strict JSON schema describing one full run.

Unknown keys anywhere are rejected. Every section has defaults, so ``{}`` is
a valid manifest (the full-size architecture on the synthetic benchmark
task); ``benchmark_manifest()`` gives the desk-scale configuration.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, field_validator

from .errors import ManifestError
from .model import ArchitectureSpec
from .optim import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TrainSection(_Strict):
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    batch_size: int = Field(128, ge=1)
    patience_epochs: int = Field(200, ge=1)
    min_improvement: float = Field(0.005, ge=0)
    relative_improvement: bool = False
    max_epochs: int = Field(2000, ge=1)
    snapshots_kept: int = Field(3, ge=0)

    def config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump())


class TaskSection(_Strict):
    """A synthetic preset or a PatchSet file."""
    preset: Optional[Literal["hard7", "default4"]] = "hard7"
    path: Optional[str] = None
    train_per_class: int = Field(300, ge=1)
    val_per_class: int = Field(150, ge=1)
    test_per_class: int = Field(150, ge=0)


class SourcesSection(_Strict):
    preset: Optional[Literal["textures3"]] = "textures3"
    paths: list[str] = []
    train_per_class: int = Field(200, ge=1)
    val_per_class: int = Field(50, ge=1)


class DataSection(_Strict):
    target: TaskSection = TaskSection()
    sources: SourcesSection = SourcesSection()
    augment: bool = True
    balance: bool = True


class ArchitectureSection(_Strict):
    k: int = Field(4, ge=1)
    dense_widths: tuple[int, int] = (512, 256)
    leaky_alpha: float = 0.3
    dropout_rate: float = 0.5

    def spec(self, num_classes: int) -> ArchitectureSpec:
        return ArchitectureSpec(k=self.k, dense_widths=self.dense_widths, num_classes=num_classes,
                                leaky_alpha=self.leaky_alpha, dropout_rate=self.dropout_rate)


class TransferSection(_Strict):
    depths: list[int] = list(range(1, 8))
    repetitions: int = Field(3, ge=1)
    freeze: bool = False
    pretrain: TrainSection = TrainSection()

    @field_validator("depths")
    @classmethod
    def _depths(cls, v):
        if not v or any(not 1 <= n <= 7 for n in v):
            raise ValueError("depths must be a nonempty list drawn from 1..7")
        return v


class EnsembleSection(_Strict):
    N: int = Field(2, ge=1)
    M: int = Field(5, ge=1)
    repeats: int = Field(10, ge=1)
    cap: int = Field(50, ge=1)
    n_scratch: int = Field(3, ge=0)
    grid: bool = False
    grid_N: list[int] = list(range(1, 26))
    grid_M: list[int] = list(range(1, 16))
    bagging: int = Field(0, ge=0)
    random_pool: bool = False


class DistillSection(_Strict):
    temperature: float = Field(1.0, gt=0)
    student_init: Literal["random"] = "random"
    train: Optional[TrainSection] = None


class MtlSection(_Strict):
    enabled: bool = True
    train: Optional[TrainSection] = None
    finetune: Optional[TrainSection] = None


class Manifest(_Strict):
    seed: int = Field(0, ge=0)
    output: Optional[str] = None
    data: DataSection = DataSection()
    architecture: ArchitectureSection = ArchitectureSection()
    train: TrainSection = TrainSection()
    transfer: TransferSection = TransferSection()
    ensemble: EnsembleSection = EnsembleSection()
    distill: DistillSection = DistillSection()
    mtl: MtlSection = MtlSection()

    def distill_train(self) -> TrainSection:
        return self.distill.train or self.train

    def mtl_train(self) -> TrainSection:
        return self.mtl.train or self.train

    def mtl_finetune(self) -> TrainSection:
        return self.mtl.finetune or self.train

    def with_seed(self, seed: int) -> "Manifest":
        return self.model_copy(update={"seed": seed})


def parse_manifest(text: str, source: str = "<manifest>") -> Manifest:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{source}: not valid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ManifestError(f"{source}: top level must be a JSON object")
    try:
        return Manifest.model_validate(raw)
    except PydanticError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
                             for err in e.errors())
        raise ManifestError(f"{source}: {problems}") from e


def load_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), str(path))


def benchmark_manifest(**overrides) -> dict:
    """Desk-scale benchmark configuration as a plain manifest dict."""
    fast = {"batch_size": 32, "patience_epochs": 4, "max_epochs": 12}
    m = {
        "seed": 0,
        "data": {
            "target": {"preset": "hard7", "train_per_class": 300, "val_per_class": 150, "test_per_class": 150},
            "sources": {"preset": "textures3", "train_per_class": 100, "val_per_class": 40},
            "augment": False,
            "balance": True,
        },
        "architecture": {"k": 1, "dense_widths": [256, 128]},
        "train": fast,
        "transfer": {"depths": [4, 6], "repetitions": 1,
                     "pretrain": {"batch_size": 32, "patience_epochs": 5, "max_epochs": 20}},
        "ensemble": {"N": 2, "M": 5, "repeats": 10, "n_scratch": 1},
        "distill": {"temperature": 1.0, "train": {**fast, "max_epochs": 40, "patience_epochs": 10}},
        "mtl": {"enabled": False},
    }
    m.update(overrides)
    return m
