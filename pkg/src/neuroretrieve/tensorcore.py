"""Reverse-mode autodiff over dense float64 arrays, plus the optimizer.

This module provides exactly what the signal encoder and its contrastive
objective need: a graph ``Tensor``, the differentiable operations the
encoder stack is composed of, global-norm gradient clipping, Adam with
decoupled weight decay, and a central finite-difference gradient checker.

Every operation validates its output and raises :class:`NumericsError` on
NaN or Inf instead of letting them propagate. Tensors are treated as
immutable once created by an op; only the optimizer mutates parameter
values, and it assumes exclusive access to the :class:`ParamSet` it steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericsError

_erf = np.vectorize(math.erf, otypes=[np.float64])

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """One node of a computation graph: float64 values plus a backward closure.

    ``grad`` is allocated (zero-filled) for every node that requires a
    gradient. Leaf parameters keep their buffer across steps so that values
    off the loss path correctly report a zero gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf gradient.

        ``self`` must be a scalar. Parameters that do not appear in the
        graph keep whatever is already in their buffer (zero after a
        ``zero_grad``), which is the documented off-path behavior.
        """
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar loss")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def backward(loss: Tensor) -> None:
    """Module-level alias for :meth:`Tensor.backward`."""
    loss.backward()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(data: np.ndarray, parents: Sequence[Tensor], bw: Callable[[np.ndarray], None]) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=bw)
    return Tensor(data)


def _require_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-d tensor, got shape {t.data.shape}")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.data.shape} and {b.data.shape} do not chain")
    out = a.data @ b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _op(out, (a, b), bw)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _op(out, (a, b), bw)


def add_rowvec(m, v) -> Tensor:
    """Add a length-d vector to every row of an (L, d) matrix."""
    m, v = _as_tensor(m), _as_tensor(v)
    _require_2d(m, "add_rowvec")
    if v.data.shape != (m.data.shape[1],):
        raise DimensionError(f"row vector {v.data.shape} does not match matrix {m.data.shape}")
    out = m.data + v.data[None, :]

    def bw(g: np.ndarray) -> None:
        if m.requires_grad:
            m.grad += g
        if v.requires_grad:
            v.grad += g.sum(axis=0)

    return _op(out, (m, v), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub shapes differ: {a.data.shape} vs {b.data.shape}")
    out = a.data - b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad -= g

    return _op(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = -a.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad -= g

    return _op(out, (a,), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            b.grad += g * a.data

    return _op(out, (a, b), bw)


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    out = a.data * factor

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * factor

    return _op(out, (a,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    x = _as_tensor(x)
    if x.data.ndim == 0 or x.data.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = np.sum(g * y, axis=axis, keepdims=True)
            x.grad += y * (g - inner)

    return _op(y, (x,), bw)


def masked_softmax_rows(x, valid_mask) -> Tensor:
    """Row softmax over the valid columns only; invalid columns get exactly 0.

    Equivalent to adding a -inf bias to masked key positions, without ever
    materializing a non-finite value.
    """
    x = _as_tensor(x)
    _require_2d(x, "masked_softmax_rows")
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != (x.data.shape[1],):
        raise DimensionError(f"mask shape {mask.shape} does not match columns of {x.data.shape}")
    if not mask.any():
        raise DimensionError("masked_softmax_rows: all positions masked")
    sub_x = x.data[:, mask]
    shifted = sub_x - sub_x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    y = np.zeros_like(x.data)
    y[:, mask] = probs

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            gv = g[:, mask]
            inner = np.sum(gv * probs, axis=1, keepdims=True)
            gx = np.zeros_like(x.data)
            gx[:, mask] = probs * (gv - inner)
            x.grad += gx

    return _op(y, (x,), bw)


def log_softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    _require_2d(x, "log_softmax_rows")
    if x.data.shape[1] == 0:
        raise DimensionError("log_softmax_rows over an empty row")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g - probs * g.sum(axis=1, keepdims=True)

    return _op(y, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learnable scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _require_2d(x, "layer_norm")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError("layer_norm gamma/beta must be length-d vectors")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = gamma.data[None, :] * xhat + beta.data[None, :]

    def bw(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=0)
        if beta.requires_grad:
            beta.grad += g.sum(axis=0)
        if x.requires_grad:
            gx = g * gamma.data[None, :]
            term_mean = gx.mean(axis=1, keepdims=True)
            term_proj = (gx * xhat).mean(axis=1, keepdims=True)
            x.grad += inv * (gx - term_mean - xhat * term_proj)

    return _op(y, (x, gamma, beta), bw)


def gelu(x) -> Tensor:
    """Exact Gaussian-error-linear unit, y = x * Phi(x)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            x.grad += g * (cdf + x.data * pdf)

    return _op(y, (x,), bw)


def concat_rows(parts: Sequence) -> Tensor:
    tensors = [_as_tensor(p) for p in parts]
    if not tensors:
        raise DimensionError("concat_rows of nothing")
    for t in tensors:
        _require_2d(t, "concat_rows")
    widths = {t.data.shape[1] for t in tensors}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows column counts differ: {sorted(widths)}")
    out = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]

    def bw(g: np.ndarray) -> None:
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                t.grad += g[offset : offset + n]
            offset += n

    return _op(out, tuple(tensors), bw)


def concat_cols(parts: Sequence) -> Tensor:
    tensors = [_as_tensor(p) for p in parts]
    if not tensors:
        raise DimensionError("concat_cols of nothing")
    for t in tensors:
        _require_2d(t, "concat_cols")
    heights = {t.data.shape[0] for t in tensors}
    if len(heights) != 1:
        raise DimensionError(f"concat_cols row counts differ: {sorted(heights)}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]

    def bw(g: np.ndarray) -> None:
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                t.grad += g[:, offset : offset + n]
            offset += n

    return _op(out, tuple(tensors), bw)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    _require_2d(x, "slice_rows")
    if not (0 <= start < stop <= x.data.shape[0]):
        raise DimensionError(f"slice_rows [{start}:{stop}] outside {x.data.shape}")
    out = x.data[start:stop].copy()

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad[start:stop] += g

    return _op(out, (x,), bw)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    _require_2d(x, "slice_cols")
    if not (0 <= start < stop <= x.data.shape[1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] outside {x.data.shape}")
    out = x.data[:, start:stop].copy()

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad[:, start:stop] += g

    return _op(out, (x,), bw)


def select_rows(x, indices) -> Tensor:
    x = _as_tensor(x)
    _require_2d(x, "select_rows")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise DimensionError("select_rows with no indices")
    if idx.min() < 0 or idx.max() >= x.data.shape[0]:
        raise DimensionError("select_rows index out of range")
    out = x.data[idx].copy()

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            np.add.at(x.grad, idx, g)

    return _op(out, (x,), bw)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    _require_2d(x, "transpose")
    out = x.data.T.copy()

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g.T

    return _op(out, (x,), bw)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(tuple(shape)).copy()

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g.reshape(x.data.shape)

    return _op(out, (x,), bw)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g

    return _op(out, (x,), bw)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.size == 0:
        raise DimensionError("mean_all of an empty tensor")
    out = np.asarray(x.data.mean())
    n = x.data.size

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g / n

    return _op(out, (x,), bw)


def masked_mean_rows(x, valid_mask) -> Tensor:
    """Mean over the valid rows of an (L, d) matrix; result shape (1, d)."""
    x = _as_tensor(x)
    _require_2d(x, "masked_mean_rows")
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != (x.data.shape[0],):
        raise DimensionError(f"mask shape {mask.shape} does not match rows of {x.data.shape}")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DimensionError("masked_mean_rows: all rows masked")
    out = x.data[idx].mean(axis=0, keepdims=True)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            np.add.at(x.grad, idx, np.repeat(g / idx.size, idx.size, axis=0))

    return _op(out, (x,), bw)


def masked_max_rows(x, valid_mask) -> Tensor:
    """Columnwise max over the valid rows; gradient routes to the first argmax."""
    x = _as_tensor(x)
    _require_2d(x, "masked_max_rows")
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != (x.data.shape[0],):
        raise DimensionError(f"mask shape {mask.shape} does not match rows of {x.data.shape}")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DimensionError("masked_max_rows: all rows masked")
    sub_x = x.data[idx]
    arg = sub_x.argmax(axis=0)
    cols = np.arange(x.data.shape[1])
    out = sub_x[arg, cols][None, :]
    winners = idx[arg]

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            np.add.at(x.grad, (winners, cols), g[0])

    return _op(out, (x,), bw)


def rowwise_max(x) -> Tensor:
    """Max along each row of an (m, n) matrix; result shape (m, 1)."""
    x = _as_tensor(x)
    _require_2d(x, "rowwise_max")
    if x.data.shape[1] == 0:
        raise DimensionError("rowwise_max over zero columns")
    arg = x.data.argmax(axis=1)
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, arg][:, None]

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            np.add.at(x.grad, (rows, arg), g[:, 0])

    return _op(out, (x,), bw)


def diag(x) -> Tensor:
    x = _as_tensor(x)
    _require_2d(x, "diag")
    n, m = x.data.shape
    if n != m:
        raise DimensionError(f"diag of a non-square matrix {x.data.shape}")
    out = np.diagonal(x.data).copy()

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            rows = np.arange(n)
            np.add.at(x.grad, (rows, rows), g)

    return _op(out, (x,), bw)


def stack_scalars(grid: Sequence[Sequence]) -> Tensor:
    """Assemble a matrix from scalar tensors; gradients fan back out cellwise."""
    cells = [[_as_tensor(c) for c in row] for row in grid]
    if not cells or not cells[0]:
        raise DimensionError("stack_scalars of an empty grid")
    width = len(cells[0])
    for row in cells:
        if len(row) != width:
            raise DimensionError("stack_scalars grid is ragged")
        for c in row:
            if c.data.size != 1:
                raise DimensionError("stack_scalars cells must be scalars")
    out = np.array([[c.data.reshape(()) for c in row] for row in cells], dtype=np.float64)
    flat = [c for row in cells for c in row]

    def bw(g: np.ndarray) -> None:
        for i, row in enumerate(cells):
            for j, c in enumerate(row):
                if c.requires_grad:
                    c.grad += g[i, j].reshape(c.data.shape)

    return _op(out, tuple(flat), bw)


def normalize_rows(x, eps: float = 1e-12) -> Tensor:
    """Scale each row of an (L, d) matrix to unit Euclidean norm."""
    x = _as_tensor(x)
    _require_2d(x, "normalize_rows")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norms <= eps):
        raise NumericsError("normalize_rows: a row has near-zero norm")
    y = x.data / norms

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * y).sum(axis=1, keepdims=True)
            x.grad += (g - y * inner) / norms

    return _op(y, (x,), bw)


def multi_head_attention(h, params: Mapping[str, Tensor], heads: int, valid_mask) -> Tensor:
    """Scaled dot-product attention with head splitting and output projection.

    ``params`` must carry wq/bq, wk/bk, wv/bv, wo/bo. Masked key positions
    receive zero attention weight. The residual/norm/feed-forward tail lives
    in :func:`transformer_layer`.
    """
    h = _as_tensor(h)
    _require_2d(h, "multi_head_attention")
    d = h.data.shape[1]
    if heads < 1 or d % heads != 0:
        raise DimensionError(f"model width {d} is not divisible into {heads} heads")
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != (h.data.shape[0],):
        raise DimensionError(f"mask shape {mask.shape} does not match sequence of {h.data.shape}")
    if not mask.any():
        raise DimensionError("multi_head_attention: all positions masked")
    q = add_rowvec(matmul(h, params["wq"]), params["bq"])
    k = add_rowvec(matmul(h, params["wk"]), params["bk"])
    v = add_rowvec(matmul(h, params["wv"]), params["bv"])
    dh = d // heads
    inv_sqrt_dh = 1.0 / math.sqrt(dh)
    head_outs = []
    for i in range(heads):
        qs = slice_cols(q, i * dh, (i + 1) * dh)
        ks = slice_cols(k, i * dh, (i + 1) * dh)
        vs = slice_cols(v, i * dh, (i + 1) * dh)
        scores = scale(matmul(qs, transpose(ks)), inv_sqrt_dh)
        probs = masked_softmax_rows(scores, mask)
        head_outs.append(matmul(probs, vs))
    merged = head_outs[0] if heads == 1 else concat_cols(head_outs)
    return add_rowvec(matmul(merged, params["wo"]), params["bo"])


def transformer_layer(h, params: Mapping[str, Tensor], heads: int, valid_mask) -> Tensor:
    """Post-norm encoder block: attention, add, norm, feed-forward, add, norm.

    The feed-forward inner width is whatever shape params carry (4d in the
    standard configuration) with a GELU nonlinearity.
    """
    attn = multi_head_attention(h, params, heads, valid_mask)
    x = layer_norm(add(_as_tensor(h), attn), params["ln1_gamma"], params["ln1_beta"])
    inner = gelu(add_rowvec(matmul(x, params["w1"]), params["b1"]))
    ff = add_rowvec(matmul(inner, params["w2"]), params["b2"])
    return layer_norm(add(x, ff), params["ln2_gamma"], params["ln2_beta"])


class ParamSet:
    """Ordered map from parameter path to leaf tensor with a persistent grad."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter path {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def copy(self) -> "ParamSet":
        clone = ParamSet()
        for name, t in self._params.items():
            clone.add(name, t.data.copy())
        return clone

    def load_from(self, other: "ParamSet") -> None:
        if other.names() != self.names():
            raise ConfigError("parameter sets do not share the same paths")
        for name, t in self._params.items():
            src = other[name].data
            if src.shape != t.data.shape:
                raise DimensionError(f"parameter {name!r} shape mismatch")
            t.data[...] = src

    def global_grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            total += float((t.grad * t.grad).sum())
        return math.sqrt(total)


@dataclass
class AdamWState:
    """First and second moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamSet) -> "AdamWState":
        state = cls()
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


def adamw_step(
    params: ParamSet,
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update with weight decay decoupled from the gradient moments."""
    if lr <= 0:
        raise ConfigError("adamw_step requires a positive learning rate")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ConfigError("adamw betas must lie in [0, 1)")
    if weight_decay < 0:
        raise ConfigError("weight decay must be non-negative")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)
        if not np.all(np.isfinite(p.data)):
            raise NumericsError(f"parameter {name!r} became non-finite during the update")


def clip_global_norm(params: ParamSet, max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most ``max_norm``.

    Returns the factor applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ConfigError("clip_global_norm requires a positive threshold")
    norm = params.global_grad_norm()
    if norm <= max_norm or not math.isfinite(norm):
        if not math.isfinite(norm):
            raise NumericsError("gradient norm is non-finite")
        return 1.0
    factor = max_norm / norm
    for t in params.tensors():
        t.grad *= factor
    return factor


def grad_check(f: Callable[[ParamSet], Tensor], params: ParamSet, h: float = 1e-5) -> float:
    """Worst-case relative error between backprop and central differences.

    ``f`` must be deterministic and rebuild its graph from the current
    parameter values on every call. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    params.zero_grad()
    loss = f(params)
    if loss.data.size != 1:
        raise DimensionError("grad_check objective must be scalar")
    loss.backward()
    analytic = {name: t.grad.copy() for name, t in params.items()}
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = f(params).item()
            flat[i] = original - h
            f_minus = f(params).item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
