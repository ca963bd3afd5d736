"""Patch datasets: windowing, extraction, D4 augmentation, balancing, splits, I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import FormatError, ShapeError, TruncatedError, ValidationError
from .tensor import RngStream

SPLITS = ("train", "val", "test")
SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}
PSET_MAGIC = b"PSET"
PSET_VERSION = 1
PATCH_SIZE = 32
HU_WINDOW = (-1000, 200)
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class PatchSet:
    """Labeled 32x32 single-channel patches with optional split tags."""

    patches: np.ndarray
    labels: np.ndarray
    class_names: list
    splits: Optional[np.ndarray] = None
    notes: str = ""

    def __post_init__(self):
        self.patches = np.ascontiguousarray(self.patches, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = [str(c) for c in self.class_names]
        if self.splits is not None:
            self.splits = np.asarray(self.splits, dtype=np.uint8)
        self.validate()

    def validate(self) -> None:
        n = len(self.labels)
        if self.patches.ndim != 3 or self.patches.shape[0] != n:
            raise ShapeError(f"PatchSet: {self.patches.shape} patches for {n} labels")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"PatchSet: label outside [0, {self.num_classes})")
        if n and (not np.all(np.isfinite(self.patches))
                  or self.patches.min() < 0.0 or self.patches.max() > 1.0):
            raise ValidationError("PatchSet: pixel values must lie in [0, 1]")
        if self.splits is not None:
            if self.splits.shape != (n,):
                raise ShapeError(f"PatchSet: {self.splits.shape} split tags for {n} patches")
            if n and self.splits.max() > 2:
                raise ValidationError("PatchSet: split tags must be 0 (train), 1 (val) or 2 (test)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def x(self) -> np.ndarray:
        """Patches with a channel axis, ``(n, 1, 32, 32)``."""
        return self.patches[:, None]

    def mask(self, split: str) -> np.ndarray:
        if self.splits is None:
            if split == "train":
                return np.ones(len(self), dtype=bool)
            raise ValidationError(f"PatchSet has no split tags, cannot select {split!r}")
        return self.splits == SPLIT_CODE[split]

    def select(self, idx) -> "PatchSet":
        idx = np.asarray(idx)
        return PatchSet(self.patches[idx], self.labels[idx], self.class_names,
                        None if self.splits is None else self.splits[idx], self.notes)

    def subset(self, split: str) -> "PatchSet":
        out = self.select(np.flatnonzero(self.mask(split)))
        out.splits = None
        return out

    def class_counts(self, split: Optional[str] = None) -> np.ndarray:
        labels = self.labels if split is None else self.labels[self.mask(split)]
        return np.bincount(labels, minlength=self.num_classes)

    def with_notes(self, note: str) -> "PatchSet":
        notes = f"{self.notes}; {note}" if self.notes else note
        return PatchSet(self.patches, self.labels, self.class_names, self.splits, notes)


def concat(sets: Sequence[PatchSet]) -> PatchSet:
    if not sets:
        raise ValidationError("concat: no PatchSets given")
    names = sets[0].class_names
    for s in sets[1:]:
        if s.class_names != names:
            raise ValidationError("concat: class names differ")
    tagged = [s.splits is not None for s in sets]
    if any(tagged) and not all(tagged):
        raise ValidationError("concat: mixing tagged and untagged sets")
    splits = np.concatenate([s.splits for s in sets]) if all(tagged) else None
    return PatchSet(np.concatenate([s.patches for s in sets]), np.concatenate([s.labels for s in sets]),
                    names, splits, sets[0].notes)


# ---------------------------------------------------------------- preprocessing

def window_normalize(raw, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> np.ndarray:
    """Clamp intensities to ``[lo, hi]`` and map linearly onto ``[0, 1]``."""
    if not lo < hi:
        raise ValidationError(f"window_normalize: need lo < hi, got [{lo}, {hi}]")
    v = np.clip(np.asarray(raw, dtype=np.float64), lo, hi)
    return ((v - lo) / (hi - lo)).astype(np.float32)


def rgb_to_gray(rgb) -> np.ndarray:
    """Luminance of an ``(..., 3)`` color image."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ShapeError(f"rgb_to_gray: last axis must hold 3 channels, got {rgb.shape}")
    return rgb @ np.asarray(LUMA_WEIGHTS)


def extract_patches(image, mask, size: int = PATCH_SIZE, min_overlap: float = 0.8,
                    return_coords: bool = False):
    """Non-overlapping grid tiles anchored at (0, 0), scanned row-major.

    A tile is kept iff its fraction of positive mask pixels is at least
    ``min_overlap``. Partial tiles at the right/bottom border are skipped.
    """
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask) != 0
    if image.shape != mask.shape or image.ndim != 2:
        raise ShapeError(f"extract_patches: image {image.shape} and mask {mask.shape} must be equal 2-d shapes")
    H, W = image.shape
    if H < size or W < size:
        raise ShapeError(f"extract_patches: image {H}x{W} smaller than patch size {size}")
    ty, tx = H // size, W // size
    tiles_m = mask[:ty * size, :tx * size].reshape(ty, size, tx, size)
    frac = tiles_m.sum(axis=(1, 3)) / float(size * size)
    keep = np.argwhere(frac >= min_overlap)
    tiles = image[:ty * size, :tx * size].reshape(ty, size, tx, size).transpose(0, 2, 1, 3)
    patches = np.stack([tiles[i, j] for i, j in keep]) if len(keep) else np.zeros((0, size, size), np.float32)
    if return_coords:
        return patches, [(int(i) * size, int(j) * size) for i, j in keep]
    return patches


# ---------------------------------------------------------------- D4 augmentation

# rotations are counter-clockwise
D4_TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda p: p,
    "rot90": lambda p: np.rot90(p, 1, axes=(-2, -1)),
    "rot180": lambda p: np.rot90(p, 2, axes=(-2, -1)),
    "rot270": lambda p: np.rot90(p, 3, axes=(-2, -1)),
    "flip_h": lambda p: p[..., :, ::-1],
    "flip_v": lambda p: p[..., ::-1, :],
    "transpose": lambda p: np.swapaxes(p, -2, -1),
    "anti_transpose": lambda p: np.rot90(np.swapaxes(p, -2, -1), 2, axes=(-2, -1)),
}
D4_INVERSE = {
    "identity": "identity", "rot90": "rot270", "rot180": "rot180", "rot270": "rot90",
    "flip_h": "flip_h", "flip_v": "flip_v", "transpose": "transpose", "anti_transpose": "anti_transpose",
}


def _train_and_rest(ps: PatchSet) -> tuple[PatchSet, Optional[PatchSet]]:
    if ps.splits is None:
        return ps, None
    tr = ps.mask("train")
    return ps.select(np.flatnonzero(tr)), ps.select(np.flatnonzero(~tr))


def _rejoin(train: PatchSet, rest: Optional[PatchSet], note: str) -> PatchSet:
    if rest is None:
        return train.with_notes(note)
    train = PatchSet(train.patches, train.labels, train.class_names,
                     np.full(len(train), SPLIT_CODE["train"], np.uint8), train.notes)
    return concat([train, rest]).with_notes(note)


def augment_d4(ps: PatchSet) -> PatchSet:
    """Expand every training patch into its 8 dihedral versions.

    Output is transform-major: all originals first, then all ``rot90``
    versions, and so on. Validation/test rows (if tagged) pass through
    unchanged after the augmented training rows.
    """
    train, rest = _train_and_rest(ps)
    patches = np.concatenate([np.ascontiguousarray(f(train.patches)) for f in D4_TRANSFORMS.values()])
    labels = np.tile(train.labels, len(D4_TRANSFORMS))
    out = PatchSet(patches, labels, train.class_names, None, train.notes)
    return _rejoin(out, rest, "augment_d4")


def balance_classes(ps: PatchSet, rng: RngStream, target: Optional[int] = None) -> PatchSet:
    """Equalize training class counts.

    Classes above the target are subsampled without replacement; classes
    below it (only possible when ``target`` exceeds the rarest class) are
    topped up with duplicates. Default target is the rarest class count.
    Selected rows keep their original relative order.
    """
    train, rest = _train_and_rest(ps)
    counts = train.class_counts()
    if np.any(counts == 0):
        empty = [train.class_names[c] for c in np.flatnonzero(counts == 0)]
        raise ValidationError(f"balance_classes: empty class(es) {empty}")
    target = int(counts.min()) if target is None else int(target)
    chosen = []
    for c in range(train.num_classes):
        idx = np.flatnonzero(train.labels == c)
        r = rng.child(c)
        if len(idx) >= target:
            pick = np.sort(r.choice(idx, size=target, replace=False))
        else:
            extra = r.choice(idx, size=target - len(idx), replace=True)
            pick = np.sort(np.concatenate([idx, extra]))
        chosen.append(pick)
    out = train.select(np.sort(np.concatenate(chosen)))
    return _rejoin(out, rest, f"balance_classes(target={target})")


def make_splits(ps: PatchSet, per_class_val: int = 150, per_class_test: int = 150,
                rng: Optional[RngStream] = None) -> PatchSet:
    """Tag ``per_class_val``/``per_class_test`` random patches of every class; the rest is train."""
    if rng is None:
        rng = RngStream(0)
    tags = np.full(len(ps), SPLIT_CODE["train"], dtype=np.uint8)
    need = per_class_val + per_class_test
    for c in range(ps.num_classes):
        idx = np.flatnonzero(ps.labels == c)
        if len(idx) <= need:
            raise ValidationError(f"make_splits: class {ps.class_names[c]!r} has {len(idx)} patches, "
                                  f"needs more than {need}")
        perm = rng.child(c).permutation(idx)
        tags[perm[:per_class_val]] = SPLIT_CODE["val"]
        tags[perm[per_class_val:need]] = SPLIT_CODE["test"]
    return PatchSet(ps.patches, ps.labels, ps.class_names, tags, ps.notes).with_notes(
        f"make_splits(val={per_class_val}, test={per_class_test}, seed={rng.seed})")


def prepare_target(ps: PatchSet, rng: RngStream, per_class_val: int = 150, per_class_test: int = 150,
                   augment: bool = True, already_split: bool = False) -> PatchSet:
    """Split, then augment and balance the training split only."""
    if not already_split:
        ps = make_splits(ps, per_class_val, per_class_test, rng.child(0))
    if augment:
        ps = augment_d4(ps)
    return balance_classes(ps, rng.child(1))


# ---------------------------------------------------------------- PatchSet files

_HEAD = struct.Struct("<4sHIHHHB")


def patchset_bytes(ps: PatchSet) -> bytes:
    n, h, w = ps.patches.shape
    if ps.num_classes > 0xFFFF:
        raise ValidationError("too many classes for the PatchSet format")
    parts = [_HEAD.pack(PSET_MAGIC, PSET_VERSION, n, h, w, ps.num_classes, int(ps.splits is not None)),
             ps.labels.astype("<u2").tobytes()]
    if ps.splits is not None:
        parts.append(ps.splits.astype("u1").tobytes())
    parts.append(ps.patches.astype("<f4").tobytes())
    for name in ps.class_names:
        b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(b)) + b)
    notes = ps.notes.encode("utf-8")
    parts.append(struct.pack("<I", len(notes)) + notes)
    return b"".join(parts)


def write_patchset(ps: PatchSet, path) -> Path:
    path = Path(path)
    path.write_bytes(patchset_bytes(ps))
    return path


def parse_patchset(raw: bytes, source: str = "<bytes>") -> PatchSet:
    if len(raw) >= 4 and raw[:4] != PSET_MAGIC:
        raise FormatError(f"{source}: not a PatchSet file (magic {raw[:4]!r})")
    if len(raw) < _HEAD.size:
        raise TruncatedError(f"{source}: truncated header")
    magic, version, n, h, w, k, has_splits = _HEAD.unpack_from(raw)
    if version != PSET_VERSION:
        raise FormatError(f"{source}: unsupported PatchSet version {version}")
    pos = _HEAD.size

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(raw):
            raise TruncatedError(f"{source}: truncated while reading {what}")
        chunk = raw[pos:pos + nbytes]
        pos += nbytes
        return chunk

    labels = np.frombuffer(take(2 * n, "labels"), dtype="<u2").astype(np.int64)
    splits = np.frombuffer(take(n, "split tags"), dtype="u1").copy() if has_splits else None
    patches = np.frombuffer(take(4 * n * h * w, "patch data"), dtype="<f4").reshape(n, h, w).astype(np.float32)
    names = []
    for _ in range(k):
        (ln,) = struct.unpack("<H", take(2, "class name length"))
        names.append(take(ln, "class name").decode("utf-8"))
    notes = ""
    if pos < len(raw):
        (ln,) = struct.unpack("<I", take(4, "notes length"))
        notes = take(ln, "notes").decode("utf-8")
    if n and labels.max() >= k:
        raise ValidationError(f"{source}: file declares {k} classes but contains label {int(labels.max())}")
    return PatchSet(patches, labels, names, splits, notes)


def read_patchset(path) -> PatchSet:
    path = Path(path)
    return parse_patchset(path.read_bytes(), str(path))


# ---------------------------------------------------------------- PGM ingestion

def read_pgm(path) -> tuple[np.ndarray, int]:
    """Binary (P5) PGM, 8- or 16-bit. Returns ``(pixels, maxval)``."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise TruncatedError(f"{path}: truncated PGM header")
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = tokens
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(raw) - pos < need:
        raise TruncatedError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return pixels.astype(np.int64), maxval


def write_pgm(path, pixels, maxval: Optional[int] = None) -> Path:
    pixels = np.asarray(pixels)
    if maxval is None:
        maxval = 255 if pixels.max(initial=0) < 256 else 65535
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    h, w = pixels.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + pixels.astype(dtype).tobytes())
    return path


def ingest_pgm(image_path, mask_path=None, label: int = 0, class_names: Sequence[str] = ("class0",),
               mode: str = "hu", hu_offset: int = -1024, window=HU_WINDOW,
               min_overlap: float = 0.8) -> PatchSet:
    """Cut patches from one PGM image (+ optional PGM mask).

    ``mode="hu"``: stored values are ``HU - hu_offset`` and get windowed;
    ``mode="scale"``: values are divided by the PGM maxval.
    """
    pixels, maxval = read_pgm(image_path)
    if mode == "hu":
        image = window_normalize(pixels + hu_offset, *window)
    elif mode == "scale":
        image = (pixels / float(maxval)).astype(np.float32)
    else:
        raise ValidationError(f"ingest_pgm: unknown mode {mode!r}")
    mask = np.ones_like(pixels) if mask_path is None else read_pgm(mask_path)[0]
    patches = extract_patches(image, mask, PATCH_SIZE, min_overlap)
    labels = np.full(len(patches), label, dtype=np.int64)
    return PatchSet(patches, labels, list(class_names), notes=f"ingest_pgm({Path(image_path).name}, mode={mode})")
