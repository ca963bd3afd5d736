"""The fixed patch-CNN family: construction, forward pass and checkpoints.

Five 2x2 convolutions (leaky ReLU) feed a global average pool and three
dense layers, with dropout in front of each dense layer. Layer ``L`` has
``k*(L+1)**2`` kernels.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError, TruncatedError, ValidationError
from .tensor import RngStream, Tensor

LAYER_NAMES = ("conv1", "conv2", "conv3", "conv4", "conv5", "dense1", "dense2", "dense3")
CONV_LAYERS = 5
MAGIC = b"TXC1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureSpec:
    k: int = 4
    conv_layers: int = CONV_LAYERS
    dense_widths: tuple = (512, 256)
    num_classes: int = 7
    leaky_alpha: float = 0.3
    dropout_rate: float = 0.5
    input_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.conv_layers != CONV_LAYERS:
            raise ValidationError(f"the architecture has exactly {CONV_LAYERS} conv layers, got {self.conv_layers}")
        if len(self.dense_widths) != 2 or min(self.dense_widths) < 1:
            raise ValidationError(f"dense_widths must be two positive widths, got {self.dense_widths}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 < self.leaky_alpha < 1.0:
            raise ValidationError(f"leaky_alpha must lie in (0, 1), got {self.leaky_alpha}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.input_size != 32:
            raise ValidationError(f"input size is fixed at 32x32, got {self.input_size}")

    def kernel_counts(self) -> list[int]:
        return [self.k * (L + 1) ** 2 for L in range(1, self.conv_layers + 1)]

    def pooled_size(self) -> int:
        """Spatial side of the last conv output (each 2x2 conv shrinks by one)."""
        return self.input_size - self.conv_layers

    def layer_shapes(self) -> list[tuple[str, tuple, tuple]]:
        """``(name, weight shape, bias shape)`` in network order."""
        shapes = []
        c_in = 1
        for i, c_out in enumerate(self.kernel_counts()):
            shapes.append((LAYER_NAMES[i], (c_out, c_in, 2, 2), (c_out,)))
            c_in = c_out
        widths = [*self.dense_widths, self.num_classes]
        for j, m in enumerate(widths):
            shapes.append((LAYER_NAMES[CONV_LAYERS + j], (m, c_in), (m,)))
            c_in = m
        return shapes

    def parameter_count(self) -> int:
        return sum(math.prod(w) + math.prod(b) for _, w, b in self.layer_shapes())


class Model:
    """A network of the patch-CNN family.

    ``params`` maps ``"<layer>.weight"`` / ``"<layer>.bias"`` to leaf tensors,
    in layer order. ``meta`` carries seed, epoch, validation score and the
    lineage tag (scratch, pretrained:<task>, finetuned, snapshot, distilled).
    """

    def __init__(self, spec: ArchitectureSpec, params: dict, meta: Optional[dict] = None):
        self.spec = spec
        self.params = params
        self.meta = {"seed": 0, "epoch": 0, "val_score": float("nan"), "lineage": "scratch"}
        if meta:
            self.meta.update(meta)
        # layers excluded from optimizer updates (empty: everything is fine-tuned)
        self.frozen: frozenset = frozenset()

    # parameter plumbing
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: state shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def copy(self, **meta) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype) for k, v in self.params.items()}
        out = Model(self.spec, params, {**self.meta, **meta})
        out.frozen = self.frozen
        return out

    def trainable(self) -> dict:
        return {k: p for k, p in self.params.items() if k.split(".")[0] not in self.frozen}

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype) for k, v in self.params.items()}
        return Model(self.spec, params, dict(self.meta))

    def layer_state(self, layer: str) -> tuple[np.ndarray, np.ndarray]:
        return self.params[f"{layer}.weight"].data, self.params[f"{layer}.bias"].data

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # computation
    def _check_input(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else T.as_tensor(batch)
        if x.data.ndim == 3:
            x = Tensor(x.data[:, None], dtype=x.dtype)
        n = self.spec.input_size
        if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (n, n):
            raise ShapeError(f"forward: expected input of shape (B, 1, {n}, {n}) (32x32 patches), got {x.shape}")
        dtype = self.params["conv1.weight"].dtype
        if x.dtype != dtype:
            x = Tensor(x.data, dtype=dtype)
        return x

    def forward_logits(self, batch, training: bool = False, rng: Optional[RngStream] = None) -> Tensor:
        x = self._check_input(batch)
        s = self.spec
        p = self.params
        # single input channel: (B,1,H,W) and (B,H,W,1) share memory layout
        x = Tensor(x.data.reshape(x.shape[0], s.input_size, s.input_size, 1), dtype=x.dtype)
        for name in LAYER_NAMES[:CONV_LAYERS]:
            x = T.conv2d_hwc(x, p[f"{name}.weight"], p[f"{name}.bias"])
            x = T.leaky_relu(x, s.leaky_alpha)
        x = T.global_avg_pool(x, channels_last=True)
        for j, name in enumerate(LAYER_NAMES[CONV_LAYERS:]):
            x = T.dropout(x, s.dropout_rate, training, rng)
            x = T.dense(x, p[f"{name}.weight"], p[f"{name}.bias"])
            if j < 2:
                x = T.relu(x)
        return x

    def forward(self, batch, training: bool = False, rng: Optional[RngStream] = None):
        """Returns ``(logits, probs)``; ``probs`` is a plain array."""
        logits = self.forward_logits(batch, training, rng)
        return logits, T.softmax(logits.data)

    def predict_logits(self, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
        patches = np.asarray(patches)
        out = []
        with T.no_grad():
            for i in range(0, len(patches), batch_size):
                out.append(self.forward_logits(patches[i:i + batch_size]).data)
        if not out:
            return np.zeros((0, self.num_classes), dtype=np.float32)
        return np.concatenate(out)

    def predict_proba(self, patches: np.ndarray, batch_size: int = 256, temperature: float = 1.0) -> np.ndarray:
        z = self.predict_logits(patches, batch_size)
        if temperature != 1.0:
            z = z / z.dtype.type(temperature)
        return T.softmax(z)


def init_layer(spec: ArchitectureSpec, name: str, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero bias for one layer."""
    shapes = {n: (w, b) for n, w, b in spec.layer_shapes()}
    wshape, bshape = shapes[name]
    fan_in = math.prod(wshape[1:])
    bound = math.sqrt(6.0 / fan_in)
    w = rng.child(LAYER_NAMES.index(name)).uniform(-bound, bound, wshape).astype(np.float32)
    return w, np.zeros(bshape, dtype=np.float32)


def build_model(spec: ArchitectureSpec, rng: RngStream, lineage: str = "scratch") -> Model:
    spec.validate()
    params = {}
    for name, _, _ in spec.layer_shapes():
        w, b = init_layer(spec, name, rng)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(b, requires_grad=True)
    return Model(spec, params, {"seed": rng.seed, "lineage": lineage})


# ---------------------------------------------------------------- checkpoints

def _header_text(model: Model, table: list[tuple[str, tuple, int]]) -> str:
    s = model.spec
    m = model.meta
    lines = [
        f"version={CHECKPOINT_VERSION}",
        f"k={s.k}",
        f"conv_layers={s.conv_layers}",
        f"dense_widths={','.join(str(w) for w in s.dense_widths)}",
        f"num_classes={s.num_classes}",
        f"leaky_alpha={s.leaky_alpha!r}",
        f"dropout_rate={s.dropout_rate!r}",
        f"input_size={s.input_size}",
        f"meta.seed={int(m.get('seed', 0))}",
        f"meta.epoch={int(m.get('epoch', 0))}",
        f"meta.val_score={float(m.get('val_score', float('nan')))!r}",
        f"meta.lineage={m.get('lineage', 'scratch')}",
    ]
    for name, dims, offset in table:
        lines.append(f"layer={name};{','.join(str(d) for d in dims)};{offset}")
    return "\n".join(lines) + "\n"


def checkpoint_bytes(model: Model) -> bytes:
    table = []
    blobs = []
    offset = 0
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        table.append((name, p.shape, offset))
        blobs.append(blob)
        offset += len(blob)
    header = _header_text(model, table).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> Model:
    if len(raw) < 8:
        if raw[:4] != MAGIC[:len(raw[:4])]:
            raise FormatError(f"{source}: not a checkpoint (bad magic)")
        raise TruncatedError(f"{source}: file truncated inside the preamble")
    if raw[:4] != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (magic {raw[:4]!r}, expected {MAGIC!r})")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise TruncatedError(f"{source}: file truncated inside the header")
    try:
        header = raw[8:8 + hlen].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{source}: header is not UTF-8") from e
    kv = {}
    table = []
    for line in header.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{source}: malformed header line {line!r}")
        if key == "layer":
            name, dims, off = value.split(";")
            table.append((name, tuple(int(d) for d in dims.split(",")), int(off)))
        else:
            kv[key] = value
    if kv.get("version") != str(CHECKPOINT_VERSION):
        raise FormatError(f"{source}: unsupported checkpoint version {kv.get('version')!r}")
    try:
        spec = ArchitectureSpec(
            k=int(kv["k"]),
            conv_layers=int(kv["conv_layers"]),
            dense_widths=tuple(int(w) for w in kv["dense_widths"].split(",")),
            num_classes=int(kv["num_classes"]),
            leaky_alpha=float(kv["leaky_alpha"]),
            dropout_rate=float(kv["dropout_rate"]),
            input_size=int(kv["input_size"]),
        )
    except KeyError as e:
        raise FormatError(f"{source}: header lacks key {e.args[0]!r}") from e
    meta = {
        "seed": int(kv.get("meta.seed", 0)),
        "epoch": int(kv.get("meta.epoch", 0)),
        "val_score": float(kv.get("meta.val_score", "nan")),
        "lineage": kv.get("meta.lineage", "scratch"),
    }
    expected = []
    for name, w, b in spec.layer_shapes():
        expected += [(f"{name}.weight", w), (f"{name}.bias", b)]
    if [n for n, _, _ in table] != [n for n, _ in expected]:
        raise ShapeError(f"{source}: layer table {[n for n, _, _ in table]} does not match the architecture")
    body = raw[8 + hlen:]
    params = {}
    for (name, dims, off), (_, want) in zip(table, expected):
        if dims != want:
            raise ShapeError(f"{source}: {name} declared {dims} but the architecture needs {want}")
        nbytes = 4 * math.prod(dims)
        if off + nbytes > len(body):
            raise TruncatedError(f"{source}: blob {name} truncated")
        arr = np.frombuffer(body, dtype="<f4", count=math.prod(dims), offset=off).reshape(dims)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return Model(spec, params, meta)


def load_checkpoint(path) -> Model:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), str(path))


def spec_with_classes(spec: ArchitectureSpec, num_classes: int) -> ArchitectureSpec:
    return replace(spec, num_classes=num_classes)
