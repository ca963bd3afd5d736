"""Procedural texture tasks used as desk-scale source and target domains.

Four families are available: oriented sinusoidal gratings, checkerboards,
multi-octave value noise and blob/dot processes. A class is a family plus
a uniform band for every family parameter; each patch draws its own values
from those bands (contrast and phase jitter included), so two patches of a
class are never identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import SPLIT_CODE, PatchSet
from .errors import ValidationError
from .tensor import RngStream

TEXTURE_STREAM = 21
SIZE = 32

_YY, _XX = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)

FAMILY_PARAMS = {
    "grating": {"freq", "angle", "mean", "contrast", "noise"},
    "checker": {"cell", "mean", "contrast", "noise"},
    "value_noise": {"cell", "octaves", "persistence", "mean", "contrast", "noise"},
    "blobs": {"density", "radius", "mean", "contrast", "noise"},
}
DEFAULT_BANDS = {"mean": (0.45, 0.55), "contrast": (0.3, 0.5), "noise": (0.0, 0.0)}


@dataclass(frozen=True)
class TextureClass:
    family: str
    bands: dict = field(default_factory=dict)
    name: str = ""

    def resolved(self) -> dict:
        b = {**DEFAULT_BANDS, **self.bands}
        return {k: tuple(float(x) for x in v) for k, v in b.items() if k in FAMILY_PARAMS[self.family]}

    def key(self) -> tuple:
        return (self.family, tuple(sorted(self.resolved().items())))


@dataclass(frozen=True)
class TextureTaskSpec:
    classes: tuple
    train_per_class: int = 200
    val_per_class: int = 50
    test_per_class: int = 0
    seed: int = 0
    name: str = "synthetic"

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise ValidationError("a texture task needs at least 2 classes")
        for c in self.classes:
            if c.family not in FAMILY_PARAMS:
                raise ValidationError(f"unknown texture family {c.family!r}")
            unknown = set(c.bands) - FAMILY_PARAMS[c.family]
            if unknown:
                raise ValidationError(f"{c.family}: unknown parameters {sorted(unknown)}")
            missing = FAMILY_PARAMS[c.family] - set(c.resolved())
            if missing:
                raise ValidationError(f"{c.family}: missing parameter bands {sorted(missing)}")
            for k, (lo, hi) in c.resolved().items():
                if lo > hi:
                    raise ValidationError(f"{c.family}.{k}: band lower bound {lo} exceeds upper {hi}")
            r = c.resolved()
            if r["mean"][0] < 0 or r["mean"][1] > 1 or r["contrast"][0] < 0 or r["noise"][0] < 0:
                raise ValidationError(f"{c.family}: mean must lie in [0,1], contrast and noise >= 0")
        keys = [c.key() for c in self.classes]
        if len(set(keys)) != len(keys):
            raise ValidationError("distinct classes must use distinct family/parameter combinations")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 0:
            raise ValidationError("per-class counts must be non-negative")

    def class_names(self) -> list[str]:
        return [c.name or f"{c.family}{i}" for i, c in enumerate(self.classes)]


# ---------------------------------------------------------------- families

def _draw(rng: RngStream, bands: dict) -> dict:
    return {k: (lo if lo == hi else float(rng.uniform(lo, hi))) for k, (lo, hi) in sorted(bands.items())}


def _grating(rng: RngStream, p: dict) -> np.ndarray:
    theta = math.radians(p["angle"])
    phase = rng.uniform(0, 2 * math.pi)
    u = _XX * math.cos(theta) + _YY * math.sin(theta)
    return np.sin(2 * math.pi * p["freq"] * u / SIZE + phase)


def _checker(rng: RngStream, p: dict) -> np.ndarray:
    cell = max(p["cell"], 1.0)
    ox, oy = rng.uniform(0, 2 * cell, size=2)
    return np.sign(np.sin(math.pi * (_XX + ox) / cell) * np.sin(math.pi * (_YY + oy) / cell) + 1e-9)


def _value_noise(rng: RngStream, p: dict) -> np.ndarray:
    total = np.zeros((SIZE, SIZE))
    amp = 1.0
    octaves = max(1, int(round(p["octaves"])))
    for o in range(octaves):
        cell = max(p["cell"] / 2 ** o, 1.0)
        n = int(math.ceil(SIZE / cell)) + 2
        lattice = rng.uniform(-1, 1, size=(n, n))
        off = rng.uniform(0, cell, size=2)
        gx = (_XX + off[0]) / cell
        gy = (_YY + off[1]) / cell
        ix, iy = gx.astype(int), gy.astype(int)
        fx, fy = gx - ix, gy - iy
        fx = fx * fx * (3 - 2 * fx)
        fy = fy * fy * (3 - 2 * fy)
        top = lattice[iy, ix] * (1 - fx) + lattice[iy, ix + 1] * fx
        bot = lattice[iy + 1, ix] * (1 - fx) + lattice[iy + 1, ix + 1] * fx
        total += amp * (top * (1 - fy) + bot * fy)
        amp *= p["persistence"]
    total -= total.mean()
    peak = np.abs(total).max()
    return total / peak if peak > 0 else total


def _blobs(rng: RngStream, p: dict) -> np.ndarray:
    count = int(rng.gen.poisson(max(p["density"], 0.0)))
    r = max(p["radius"], 0.5)
    field_ = np.zeros((SIZE, SIZE))
    if count:
        cx = rng.uniform(-r, SIZE + r, size=count)
        cy = rng.uniform(-r, SIZE + r, size=count)
        d2 = (_XX[None] - cx[:, None, None]) ** 2 + (_YY[None] - cy[:, None, None]) ** 2
        field_ = np.exp(-d2 / (2 * r * r)).max(axis=0)
    return 2.0 * field_ - 1.0


_FAMILIES = {"grating": _grating, "checker": _checker, "value_noise": _value_noise, "blobs": _blobs}


def render_patch(cls: TextureClass, rng: RngStream) -> np.ndarray:
    """One 32x32 patch in [0, 1] for ``cls``, fully determined by ``rng``."""
    p = _draw(rng, cls.resolved())
    base = _FAMILIES[cls.family](rng, p)
    img = p["mean"] + 0.5 * p["contrast"] * base
    if p["noise"] > 0:
        img = img + rng.normal(0.0, p["noise"], size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_texture_task(spec: TextureTaskSpec) -> PatchSet:
    """Generate the task's patches, tagged train/val/test, grouped by split then class."""
    spec.validate()
    root = RngStream(spec.seed, TEXTURE_STREAM)
    patches, labels, tags = [], [], []
    counts = {"train": spec.train_per_class, "val": spec.val_per_class, "test": spec.test_per_class}
    for split, n in counts.items():
        code = SPLIT_CODE[split]
        for c, cls in enumerate(spec.classes):
            for i in range(n):
                patches.append(render_patch(cls, root.child(code, c, i)))
                labels.append(c)
                tags.append(code)
    arr = np.stack(patches) if patches else np.zeros((0, SIZE, SIZE), np.float32)
    return PatchSet(arr, np.asarray(labels), spec.class_names(), np.asarray(tags, np.uint8),
                    notes=f"synth_texture_task({spec.name}, seed={spec.seed})")


# ---------------------------------------------------------------- presets

def default_task(seed: int = 0, train_per_class: int = 200, val_per_class: int = 50,
                 test_per_class: int = 50) -> TextureTaskSpec:
    """Four well separated classes, one per family."""
    low = (0.2, 0.3)
    classes = (
        TextureClass("grating", {"freq": (3, 4), "angle": (0, 20), "mean": (0.18, 0.22), "contrast": low},
                     "grating"),
        TextureClass("checker", {"cell": (4, 6), "mean": (0.38, 0.42), "contrast": low}, "checker"),
        TextureClass("value_noise", {"cell": (8, 12), "octaves": (2, 3), "persistence": (0.5, 0.6),
                                     "mean": (0.58, 0.62), "contrast": low}, "value_noise"),
        TextureClass("blobs", {"density": (8, 12), "radius": (1.5, 2.5), "mean": (0.78, 0.82), "contrast": low},
                     "blobs"),
    )
    return TextureTaskSpec(classes, train_per_class, val_per_class, test_per_class, seed, "default4")


def hard_target_task(seed: int = 0, train_per_class: int = 300, val_per_class: int = 150,
                     test_per_class: int = 150) -> TextureTaskSpec:
    """Seven classes with overlapping parameter bands, shared intensity range and pixel noise."""
    common = {"mean": (0.35, 0.65), "contrast": (0.2, 0.5), "noise": (0.06, 0.1)}
    classes = (
        TextureClass("grating", {**common, "freq": (2, 4.5), "angle": (0, 60)}, "grating_low"),
        TextureClass("grating", {**common, "freq": (3.5, 6), "angle": (40, 100)}, "grating_high"),
        TextureClass("checker", {**common, "cell": (3, 6)}, "checker_fine"),
        TextureClass("checker", {**common, "cell": (5, 9)}, "checker_coarse"),
        TextureClass("value_noise", {**common, "cell": (6, 10), "octaves": (2, 3), "persistence": (0.4, 0.6)},
                     "noise_smooth"),
        TextureClass("value_noise", {**common, "cell": (4, 8), "octaves": (2, 4), "persistence": (0.5, 0.75)},
                     "noise_rough"),
        TextureClass("blobs", {**common, "density": (6, 14), "radius": (1.5, 3.0)}, "blobs"),
    )
    return TextureTaskSpec(classes, train_per_class, val_per_class, test_per_class, seed, "hard7")


def source_tasks(seed: int = 0, train_per_class: int = 200, val_per_class: int = 50) -> list[TextureTaskSpec]:
    """Three source domains with different class counts and emphases."""
    a = tuple(TextureClass("grating", {"freq": (f, f + 1.5), "angle": (ang, ang + 30)}, f"g{f}_{ang}")
              for f, ang in ((2, 0), (2, 90), (5, 0), (5, 90), (8, 45)))
    b = (
        TextureClass("checker", {"cell": (2, 3)}, "chk_small"),
        TextureClass("checker", {"cell": (6, 8)}, "chk_large"),
        TextureClass("blobs", {"density": (3, 6), "radius": (2, 3)}, "blob_sparse"),
        TextureClass("blobs", {"density": (15, 25), "radius": (1, 1.8)}, "blob_dense"),
    )
    lo, hi = (0.15, 0.3), (0.55, 0.8)
    c = tuple(TextureClass("value_noise", {"cell": cell, "octaves": (o, o), "persistence": (0.5, 0.6),
                                           "contrast": con}, f"vn{cell[0]}_{tag}")
              for cell, o in (((3, 4), 1), ((8, 10), 2), ((16, 18), 1))
              for con, tag in ((lo, "lo"), (hi, "hi")))
    return [
        TextureTaskSpec(a, train_per_class, val_per_class, 0, seed + 101, "src_gratings"),
        TextureTaskSpec(b, train_per_class, val_per_class, 0, seed + 202, "src_checker_blobs"),
        TextureTaskSpec(c, train_per_class, val_per_class, 0, seed + 303, "src_noise"),
    ]
