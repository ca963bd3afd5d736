"""Minimal tensor type and reverse-mode differentiation for the patch CNN.

Only the operators the network family needs are provided: 2x2 valid
convolution, leaky/plain ReLU, global average pooling, dense layers,
inverted dropout and softmax cross-entropy (hard or soft targets).

Every operator accepts either a single sample or a leading batch axis.
Storage is float32; float64 tensors are accepted so tests can evaluate a
high-precision shadow of the same graph.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import GraphError, ShapeError, ValidationError

LOG_EPS = 1e-12
DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class RngStream:
    """Deterministic random stream keyed by ``(seed, stream)``.

    Backed by numpy's PCG64 seeded through ``SeedSequence([seed, stream])``;
    child keys become the sequence's spawn key.
    ``child(*keys)`` derives an independent stream, which lets per-item
    generators be computed in any order.
    """

    def __init__(self, seed: int, stream: int = 0, _keys: tuple = ()):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream id must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        self._keys = tuple(int(k) for k in _keys)
        # keys go in the spawn key: zero-padded entropy would make child(0) equal its parent
        ss = np.random.SeedSequence([self.seed, self.stream], spawn_key=self._keys)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream, self._keys + tuple(keys))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream}, keys={self._keys})"

    # thin pass-throughs
    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)


class Tensor:
    """An n-d float array that may carry a gradient buffer.

    Tensors are treated as immutable once produced. Leaves created with
    ``requires_grad=True`` accumulate ``grad`` during :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = DEFAULT_DTYPE
        # asarray keeps 0-d scalars 0-d, unlike ascontiguousarray
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    return Tensor(arr, dtype=arr.dtype if arr.dtype == np.float64 else DEFAULT_DTYPE)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if root._backward is None and not root.requires_grad:
        raise GraphError("backward called on a tensor with no recorded forward graph")
    if grad is None:
        if root.data.size != 1:
            raise GraphError(f"implicit gradient needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=root.dtype)
    if grad.shape != root.shape:
        raise ShapeError(f"seed gradient shape {grad.shape} != root shape {root.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not _needs(p):
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g


# ---------------------------------------------------------------- operators

def _batched(x: Tensor, ndim: int, name: str) -> bool:
    if x.data.ndim == ndim:
        return False
    if x.data.ndim == ndim + 1:
        return True
    raise ShapeError(f"{name}: expected {ndim}-d input (or batched {ndim + 1}-d), got shape {x.shape}")


_TAPS = (
    (slice(None, -1), slice(None, -1)),
    (slice(None, -1), slice(1, None)),
    (slice(1, None), slice(None, -1)),
    (slice(1, None), slice(1, None)),
)


def conv2d_hwc(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Channels-last core of :func:`conv2d`: ``(B,H,W,C) -> (B,H-1,W-1,K)``.

    im2col gathers the four taps of every output pixel into one row, so the
    forward pass and both gradients are single matrix products.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d_hwc: expected (B, H, W, C) input, got shape {x.shape}")
    B, H, W, C = x.shape
    if kernels.data.ndim != 4 or kernels.shape[2:] != (2, 2):
        raise ShapeError(f"conv2d: kernels must have shape (K, C, 2, 2), got {kernels.shape}")
    K, Ck = kernels.shape[:2]
    if Ck != C:
        raise ShapeError(f"conv2d: kernels expect {Ck} input channels but input has C={C} "
                         f"(input {x.shape}, kernels {kernels.shape})")
    if bias.shape != (K,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match K={K}")
    if H < 2 or W < 2:
        raise ShapeError(f"conv2d: spatial size must be at least 2x2, got H={H}, W={W}")
    Ho, Wo = H - 1, W - 1
    xd = x.data
    cols = np.stack(
        (xd[:, :-1, :-1], xd[:, :-1, 1:], xd[:, 1:, :-1], xd[:, 1:, 1:]), axis=3
    ).reshape(B * Ho * Wo, 4 * C)
    # (K, C, dy, dx) -> (K, tap, C) to match the column layout
    w2 = kernels.data.transpose(0, 2, 3, 1).reshape(K, 4 * C)
    out = cols @ w2.T
    out += bias.data
    out = out.reshape(B, Ho, Wo, K)

    def _bw(g):
        g2 = g.reshape(B * Ho * Wo, K)
        gx = gw = gb = None
        if _needs(kernels):
            gw = (g2.T @ cols).reshape(K, 2, 2, C).transpose(0, 3, 1, 2).copy()
        if _needs(bias):
            gb = np.ones(g2.shape[0], dtype=g2.dtype) @ g2
        if _needs(x):
            # one product per tap keeps the scatter-add on contiguous blocks
            gx = np.zeros_like(xd)
            for tap, (ys, xs) in enumerate(_TAPS):
                gx[:, ys, xs] += (g2 @ w2[:, tap * C:(tap + 1) * C]).reshape(B, Ho, Wo, C)
        return gx, gw, gb

    return _result(out, (x, kernels, bias), _bw, "conv2d")


def to_channels_last(x: Tensor) -> Tensor:
    """``(B,C,H,W) -> (B,H,W,C)``."""
    out = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))

    def _bw(g):
        return (np.ascontiguousarray(g.transpose(0, 3, 1, 2)),)

    return _result(out, (x,), _bw, "to_channels_last")


def to_channels_first(x: Tensor) -> Tensor:
    """``(B,H,W,C) -> (B,C,H,W)``."""
    out = np.ascontiguousarray(x.data.transpose(0, 3, 1, 2))

    def _bw(g):
        return (np.ascontiguousarray(g.transpose(0, 2, 3, 1)),)

    return _result(out, (x,), _bw, "to_channels_first")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def _bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), _bw, "reshape")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid 2x2 convolution, stride 1: ``(C,H,W) -> (K,H-1,W-1)``.

    ``out[k,y,x] = bias[k] + sum_{c,dy,dx} input[c,y+dy,x+dx] * kernels[k,c,dy,dx]``.
    A leading batch axis ``(B,C,H,W)`` is also accepted.
    """
    batched = _batched(x, 3, "conv2d")
    if not batched:
        x = reshape(x, (1, *x.shape))
    out = to_channels_first(conv2d_hwc(to_channels_last(x), kernels, bias))
    if not batched:
        out = reshape(out, out.shape[1:])
    return out


def leaky_relu(x: Tensor, alpha: float = 0.3) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu: alpha must lie in (0, 1), got {alpha}")
    a = x.dtype.type(alpha)
    # max(x, a*x) equals the leaky branch for 0 < a < 1
    out = np.maximum(x.data, x.data * a)

    def _bw(g):
        slope = (x.data >= 0).astype(g.dtype)
        slope *= g.dtype.type(1.0 - alpha)
        slope += a
        slope *= g
        return (slope,)

    return _result(out, (x,), _bw, "leaky_relu")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.dtype.type(0))

    def _bw(g):
        return (g * (x.data > 0).astype(g.dtype),)

    return _result(out, (x,), _bw, "relu")


def activation(x: Tensor, kind: str, alpha: float = 0.3) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: Tensor, channels_last: bool = False) -> Tensor:
    """Mean over the spatial axes: ``(C,H,W) -> (C,)``.

    With ``channels_last`` the input is ``(B,H,W,C)`` and the output ``(B,C)``.
    """
    if channels_last:
        if x.data.ndim != 4:
            raise ShapeError(f"global_avg_pool: expected (B, H, W, C), got shape {x.shape}")
        axes = (1, 2)
    else:
        _batched(x, 3, "global_avg_pool")
        axes = (-2, -1)
    H, W = (x.shape[a] for a in axes)
    if H * W == 0:
        raise ShapeError("global_avg_pool: empty spatial extent")
    out = x.data.mean(axis=axes, dtype=x.dtype)
    scale = x.dtype.type(1.0 / (H * W))

    def _bw(g):
        gs = g * scale
        gs = gs[:, None, None, :] if channels_last else gs[..., None, None]
        return (np.broadcast_to(gs, x.shape).copy(),)

    return _result(out, (x,), _bw, "global_avg_pool")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``weights @ x + bias`` for ``x`` of shape (N,) or (B, N)."""
    batched = _batched(x, 1, "dense")
    if weights.data.ndim != 2:
        raise ShapeError(f"dense: weights must be 2-d, got shape {weights.shape}")
    M, N = weights.shape
    if x.shape[-1] != N:
        raise ShapeError(f"dense: weights expect N={N} inputs but x has {x.shape[-1]} (x {x.shape}, weights {weights.shape})")
    if bias.shape != (M,):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match M={M}")
    out = x.data @ weights.data.T + bias.data

    def _bw(g):
        gx = g @ weights.data if _needs(x) else None
        if batched:
            gw = g.T @ x.data if _needs(weights) else None
            gb = g.sum(axis=0) if _needs(bias) else None
        else:
            gw = np.outer(g, x.data) if _needs(weights) else None
            gb = g.copy() if _needs(bias) else None
        return gx, gw, gb

    return _result(out, (x, weights, bias), _bw, "dense")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[RngStream] = None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: an RngStream is required in training mode")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    out = x.data * mask

    def _bw(g):
        return (g * mask,)

    return _result(out, (x,), _bw, "dropout")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: Tensor, target) -> tuple[Tensor, np.ndarray]:
    """Cross-entropy of ``softmax(logits)`` against a probability target.

    Accepts (K,) or (B, K); for a batch the loss is the mean over rows.
    Returns ``(loss, probs)``.
    """
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"softmax_xent: target shape {t.shape} != logits shape {logits.shape}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=-1) - 1.0) > 1e-5):
        raise ValidationError("softmax_xent: target rows must be non-negative and sum to 1")
    p = softmax(logits.data)
    eps = logits.dtype.type(LOG_EPS)
    rows = 1 if logits.data.ndim == 1 else logits.shape[0]
    loss = -(t * np.log(p + eps)).sum() / logits.dtype.type(rows)

    def _bw(g):
        # exact gradient of -sum t*log(p+eps) through the softmax
        r = t * p / (p + eps)
        grad = p * r.sum(axis=-1, keepdims=True) - r
        return (grad * (g / logits.dtype.type(rows)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), _bw, "softmax_xent"), p


def tensor_sum(x: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """``sum(x)`` or ``sum(weights * x)`` with constant weights, as a scalar."""
    w = None if weights is None else np.asarray(weights, dtype=x.dtype)
    out = np.asarray((x.data if w is None else x.data * w).sum(), dtype=x.dtype)

    def _bw(g):
        return ((np.ones_like(x.data) if w is None else w) * g,)

    return _result(out, (x,), _bw, "sum")


def pick(x: Tensor, index) -> Tensor:
    """Select one element as a scalar tensor."""
    out = np.asarray(x.data[index], dtype=x.dtype)

    def _bw(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _result(out, (x,), _bw, "pick")
