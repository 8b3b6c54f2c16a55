"""Dense numpy tensors with reverse-mode gradients.

Only the handful of operations a small decoder-only transformer needs are
provided. Every op checks shapes explicitly (no broadcasting beyond a row-wise
bias add) and refuses to produce NaN or Inf.
"""

from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "NumericsError",
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Parameter",
    "no_grad",
    "grad_enabled",
    "constant",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "scale_rows",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "relu",
    "sigmoid",
    "embedding",
    "gather_rows",
    "scatter_rows",
    "slice_cols",
    "concat_cols",
    "total",
    "cross_entropy",
    "backward",
    "GradCheckReport",
    "check_gradients",
    "save_checkpoint",
    "load_checkpoint",
]


class NumericsError(ValueError):
    pass


class ShapeError(NumericsError):
    pass


class NonFiniteError(NumericsError, FloatingPointError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A value node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    # operator sugar, same-shape only
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf whose gradient accumulates across backward passes."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite result")


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(data, op)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``a`` with a 2-D or 1-D ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def grad(g):
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return _result(A @ B, "matmul", (a, b), grad)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _result(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _result(a.data + b.data, "add", (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (kept in the tensor's dtype)."""
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of ``x`` by ``s[i]``; a 1-D ``x`` with scalar ``s`` also works."""
    x, s = _as_tensor(x), _as_tensor(s)
    X, S = x.data, s.data
    if X.ndim == 2 and S.shape == (X.shape[0],):
        out = X * S[:, None]

        def grad(g):
            return g * S[:, None], np.einsum("ij,ij->i", g, X)

    elif X.ndim == 1 and S.ndim == 0:
        out = X * S

        def grad(g):
            return g * S, np.asarray(np.dot(g, X))

    else:
        raise ShapeError(f"scale_rows: {x.shape} with scales {s.shape}")
    return _result(out, "scale_rows", (x, s), grad)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax. ``mask`` is boolean, True where a column may receive mass.

    Masked entries get probability exactly zero.
    """
    x = _as_tensor(x)
    X = x.data
    if X.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D, got {x.shape}")
    if mask is not None:
        if mask.shape != X.shape:
            raise ShapeError(f"softmax_rows: mask {mask.shape} vs input {X.shape}")
        if not mask.any(axis=1).all():
            raise NumericsError("softmax_rows: a row has every entry masked")
        X = np.where(mask, X, -np.inf)
    z = X - X.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (p * (g - np.einsum("ij,ij->i", g, p)[:, None]),)

    return _result(p, "softmax_rows", (x,), grad)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    X = x.data
    if X.ndim != 2 or gain.shape != (X.shape[1],) or bias.shape != (X.shape[1],):
        raise ShapeError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    d = X.shape[1]
    mean = X.mean(axis=1, keepdims=True)
    xc = X - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + X.dtype.type(eps))
    xhat = xc * inv
    G = gain.data
    out = xhat * G + bias.data

    def grad(g):
        gx_hat = g * G
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=1, keepdims=True)
                        - xhat * np.einsum("ij,ij->i", gx_hat, xhat)[:, None])
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, "layer_norm", (x, gain, bias), grad)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    X = x.data
    c = X.dtype.type(_GELU_C)
    k = X.dtype.type(0.044715)
    half = X.dtype.type(0.5)
    x2 = X * X
    inner = c * (X + k * x2 * X)
    t = np.tanh(inner)
    out = half * X * (1 + t)

    def grad(g):
        dinner = c * (1 + 3 * k * x2)
        return (g * (half * (1 + t) + half * X * (1 - t * t) * dinner),)

    return _result(out, "gelu", (x,), grad)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    on = x.data > 0
    return _result(np.where(on, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    s = np.where(X >= 0, 1 / (1 + np.exp(-np.abs(X))), np.exp(-np.abs(X)) / (1 + np.exp(-np.abs(X))))
    s = s.astype(X.dtype)
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),))


# ---------------------------------------------------------------------------
# indexing


def _index_array(idx, n: int, op: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"{op}: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"{op}: index out of range for extent {n}")
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows (or elements, for 1-D ``x``) at ``idx``; repeated indices are allowed."""
    x = _as_tensor(x)
    idx = _index_array(idx, x.shape[0], "gather_rows")
    shape = x.shape

    def grad(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], "gather_rows", (x,), grad)


def embedding(table: Tensor, ids) -> Tensor:
    """Lookup rows of an embedding table."""
    return gather_rows(table, ids)


def scatter_rows(x: Tensor, idx, n: int) -> Tensor:
    """Zeros of extent ``n`` along axis 0 with ``x`` added at rows ``idx``."""
    x = _as_tensor(x)
    idx = _index_array(idx, n, "scatter_rows")
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter_rows: {idx.shape[0]} indices for {x.shape[0]} rows")
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, idx, x.data)
    return _result(out, "scatter_rows", (x,), lambda g: (g[idx],))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] of {x.shape}")
    shape = x.shape

    def grad(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _result(x.data[:, start:stop].copy(), "slice_cols", (x,), grad)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts or any(p.data.ndim != 2 or p.shape[0] != parts[0].shape[0] for p in parts):
        raise ShapeError("concat_cols: need 2-D parts with equal row counts")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), "concat_cols", parts, grad)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    x = _as_tensor(x)
    shape = x.shape
    return _result(np.asarray(x.data.sum()), "total", (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of per-row negative log-likelihoods of ``targets``.

    Rows with weight zero contribute nothing (their targets may be -1).
    """
    logits = _as_tensor(logits)
    Z = logits.data
    if Z.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    n, v = Z.shape
    t = np.asarray(targets, dtype=np.int64)
    w = np.ones(n, dtype=Z.dtype) if weights is None else np.asarray(weights, dtype=Z.dtype)
    if t.shape != (n,) or w.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows, targets {t.shape}, weights {w.shape}")
    active = w != 0
    if np.any((t[active] < 0) | (t[active] >= v)):
        raise ShapeError("cross_entropy: target id out of range")
    tt = np.where(active, t, 0)
    m = Z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(Z - m).sum(axis=1))
    nll = lse - Z[np.arange(n), tt]
    out = np.asarray(np.sum(np.where(active, w * nll, 0)), dtype=Z.dtype)

    def grad(g):
        p = np.exp(Z - lse[:, None])
        p[np.arange(n), tt] -= 1
        return (p * (w * active)[:, None] * g,)

    return _result(out, "cross_entropy", (logits,), grad)


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.data.size != 1:
        raise ShapeError("backward: root must be a scalar")
    if not root.requires_grad:
        return
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    per_parameter: dict[str, float] = field(default_factory=dict)
    eps: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol


def check_gradients(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` is re-evaluated with each parameter entry nudged in place; relative
    error uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    params = list(params)
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        if p.dtype != np.float64:
            raise NumericsError(f"check_gradients needs float64, {p.name} is {p.dtype}")
        p.zero_grad()
    out = f()
    _check_finite(out.data, "check_gradients")
    out.backward()
    report = GradCheckReport(eps=eps)
    with no_grad():
        for p in params:
            analytic = p.grad.copy()
            numeric = np.zeros_like(analytic)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f().data)
                flat[i] = orig - eps
                lo = float(f().data)
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NonFiniteError(f"check_gradients: non-finite probe at {p.name}[{i}]")
                numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
            err = np.abs(analytic - numeric) / denom
            report.per_parameter[p.name] = float(err.max()) if err.size else 0.0
    return report


# ---------------------------------------------------------------------------
# checkpoints

MANIFEST = "manifest.txt"
BLOB = "weights.bin"


def save_checkpoint(path: str | os.PathLike, params: Sequence[Parameter],
                    meta: Mapping[str, str] | None = None) -> None:
    """Write ``manifest.txt`` plus one little-endian blob per parameter, in order."""
    os.makedirs(path, exist_ok=True)
    lines = ["format = modstream-checkpoint-1"]
    for k, v in (meta or {}).items():
        lines.append(f"{k} = {v}")
    offset = 0
    with open(os.path.join(path, BLOB), "wb") as fh:
        for p in params:
            arr = np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<"))
            raw = arr.tobytes()
            fh.write(raw)
            shape = ",".join(str(s) for s in p.shape)
            lines.append(f"param = {p.name} {p.dtype.name} {shape} {offset} {len(raw)}")
            offset += len(raw)
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Inverse of :func:`save_checkpoint`: ``(arrays by name, metadata)``."""
    manifest = os.path.join(path, MANIFEST)
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(os.path.join(path, BLOB), "rb") as fh:
        blob = fh.read()
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(" = ")
            if key != "param":
                meta[key] = value
                continue
            name, dtype, shape, offset, nbytes = value.split(" ")
            shape_t = tuple(int(s) for s in shape.split(",")) if shape else ()
            dt = np.dtype(dtype).newbyteorder("<")
            arr = np.frombuffer(blob, dtype=dt, count=int(nbytes) // dt.itemsize, offset=int(offset))
            arrays[name] = arr.reshape(shape_t).astype(np.dtype(dtype))
    return arrays, meta
