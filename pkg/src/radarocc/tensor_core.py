"""Small reverse-mode autodiff core on float64 numpy arrays.

Every op computes its forward value eagerly. While a :class:`Tape` is active,
ops whose inputs require gradients append a backward closure to the tape;
``Tape.backward`` replays those closures in reverse order.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


class GradientCheckError(RuntimeError):
    def __init__(self, input_index: int, coord: tuple, message: str):
        super().__init__(f"input {input_index} coord {coord}: {message}")
        self.input_index = input_index
        self.coord = coord


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None


class Parameter(Tensor):
    """A named trainable array with a preallocated gradient slot."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(value, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @value.setter
    def value(self, v) -> None:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.data.shape:
            raise ShapeError(f"{self.name}: cannot assign {v.shape} to {self.data.shape}")
        self.data = v.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Records executed ops so gradients can be replayed in reverse."""

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, grad=None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        _accumulate(loss, np.asarray(grad, dtype=np.float64))
        for out, backward in reversed(self.records):
            if out.grad is not None:
                backward(out.grad)
        # intermediate grads are only meaningful during the replay
        for out, _ in self.records:
            if not isinstance(out, Parameter):
                out.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].records.append((out, backward))
    return out


def scatter_add_rows(n_rows: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum rows of ``vals`` (M, C) into an (n_rows, C) array at ``idx`` (repeats allowed)."""
    out = np.empty((n_rows, vals.shape[1]))
    for c in range(vals.shape[1]):
        out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=n_rows)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN so numeric failures reach the loss check
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: _accumulate(x, g * mask))


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: _accumulate(x, g * keep))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(np.matmul(a.data, b.data), (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accumulate(w, x2.T @ g2)
        if b is not None:
            _accumulate(b, g2.sum(axis=0))

    return _result(out.reshape(*lead, w.shape[1]), parents, backward)


# ---------------------------------------------------------------- reductions / normalization

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.array(x.data.sum()), (x,), lambda g: _accumulate(x, np.broadcast_to(g, x.shape)))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _result(np.array(x.data.mean()), (x,),
                   lambda g: _accumulate(x, np.broadcast_to(g / n, x.shape)))


def sum_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.sum(axis=axis), (x,),
                   lambda g: _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape)))


def segment_mean(x, groups: np.ndarray, n_groups: int) -> Tensor:
    """Average rows of a 2-D tensor sharing a group id; empty groups give zero rows."""
    x = as_tensor(x)
    groups = np.asarray(groups, dtype=np.int64)
    counts = np.bincount(groups, minlength=n_groups).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    out = scatter_add_rows(n_groups, groups, x.data) * inv[:, None]
    return _result(out, (x,), lambda g: _accumulate(x, g[groups] * inv[groups, None]))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- shape plumbing

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: _accumulate(x, np.transpose(g, inv)))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, gi in zip(xs, np.split(g, splits, axis=axis)):
            _accumulate(x, gi)

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def take_rows(x, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; index -1 yields a zero row."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = x.data[safe] * valid[..., None]

    def backward(g):
        if x.requires_grad:
            rows = g[valid].reshape(-1, x.shape[1])
            _accumulate(x, scatter_add_rows(x.shape[0], safe[valid], rows))

    return _result(out, (x,), backward)


def scatter_rows(x, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place rows of ``x`` at distinct positions ``idx`` of an all-zero (n_rows, C) array."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows, x.shape[1]))
    out[idx] = x.data
    return _result(out, (x,), lambda g: _accumulate(x, g[idx]))


def where_rows(mask: np.ndarray, a, b) -> Tensor:
    """Row-wise select: rows of ``a`` where mask is true, else rows of ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool).reshape(-1, *([1] * (a.data.ndim - 1)))

    def backward(g):
        _accumulate(a, g * m)
        _accumulate(b, g * ~m)

    return _result(np.where(m, a.data, b.data), (a, b), backward)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of a (X, Y, Z, C) volume on the three spatial axes."""
    x = as_tensor(x)
    X, Y, Z, C = x.shape
    out = x.data.repeat(factor, 0).repeat(factor, 1).repeat(factor, 2)

    def backward(g):
        gx = g.reshape(X, factor, Y, factor, Z, factor, C).sum(axis=(1, 3, 5))
        _accumulate(x, gx)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- attention

def multi_head_attention(q, k, v, params: dict, heads: int, dropout_p: float = 0.0,
                         rng: np.random.Generator | None = None, training: bool = False,
                         key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with input/output projections.

    ``q, k, v`` have shape (..., T, e). ``params`` holds ``wq, bq, wk, wv, bv,
    wo, bo``; a key bias would cancel inside the softmax so there is none. ``key_mask`` (..., T) marks valid keys; masked keys get zero weight.
    Dropout acts on the attention weights.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    e = q.shape[-1]
    if e % heads != 0:
        raise ShapeError(f"embedding width {e} not divisible by {heads} heads")
    dh = e // heads
    lead = q.shape[:-2]
    T = q.shape[-2]
    Tk = k.shape[-2]

    def split(x, n):
        x = reshape(x, (*lead, n, heads, dh))
        nd = len(lead)
        return transpose(x, (*range(nd), nd + 1, nd, nd + 2))

    Q = split(linear(q, params["wq"], params["bq"]), T)
    K = split(linear(k, params["wk"]), Tk)
    V = split(linear(v, params["wv"], params["bv"]), Tk)
    nd = len(lead)
    Kt = transpose(K, (*range(nd), nd, nd + 2, nd + 1))
    scores = scale(matmul(Q, Kt), 1.0 / np.sqrt(dh))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, bool), 0.0, -1e30)[..., None, None, :]
        scores = add(scores, bias)
    att = softmax(scores, axis=-1)
    att = dropout(att, dropout_p, rng, training)
    ctx = matmul(att, V)
    ctx = transpose(ctx, (*range(nd), nd + 1, nd, nd + 2))
    ctx = reshape(ctx, (*lead, T, e))
    return linear(ctx, params["wo"], params["bo"])


# ---------------------------------------------------------------- sampling

def _corner_setup(pts: np.ndarray, extents: Sequence[int]):
    ext = np.asarray(extents, dtype=np.float64)
    hi = ext - 1
    clamped = np.clip(pts, 0.0, hi)
    inside = (pts >= 0.0) & (pts <= hi)
    # NaN locations index corner 0 and keep a NaN fraction, so the sample is NaN
    base = np.floor(np.nan_to_num(clamped, nan=0.0)).astype(np.int64)
    base = np.minimum(base, np.maximum(ext.astype(np.int64) - 2, 0))
    frac = clamped - base
    return base, frac, inside


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def sample_heads(vol, pts) -> Tensor:
    """Per-head trilinear sampling.

    ``vol`` is (X, Y, Z, M, Cv); ``pts`` is (N, M, K, 3) fractional indices. Head
    ``m`` samples only its own channel block. Returns (N, M, K, Cv). Points
    outside the box are clamped onto it.
    """
    vol, pts = as_tensor(vol), as_tensor(pts)
    X, Y, Z, M, Cv = vol.shape
    N, Mp, K, _ = pts.shape
    if Mp != M:
        raise ShapeError(f"sample_heads: {Mp} point heads vs {M} volume heads")
    ext = (X, Y, Z)
    base, frac, inside = _corner_setup(pts.data, ext)
    flat = vol.data.reshape(-1, Cv)
    head = np.arange(M)[None, :, None]
    out = np.zeros((N, M, K, Cv))
    rows = []
    weights = []
    for c in _CORNERS:
        ijk = np.minimum(base + c, np.array(ext) - 1)
        row = (((ijk[..., 0] * Y + ijk[..., 1]) * Z + ijk[..., 2]) * M + head)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=-1)
        out += w[..., None] * flat[row]
        rows.append(row)
        weights.append(w)

    def backward(g):
        if vol.requires_grad:
            idx = np.concatenate([row.ravel() for row in rows])
            vals = np.concatenate([(w[..., None] * g).reshape(-1, Cv) for w in weights])
            _accumulate(vol, scatter_add_rows(flat.shape[0], idx, vals).reshape(vol.shape))
        if pts.requires_grad:
            gp = np.zeros(pts.shape)
            for c, row in zip(_CORNERS, rows):
                dot = (flat[row] * g).sum(axis=-1)
                for ax in range(3):
                    sign = 1.0 if c[ax] == 1 else -1.0
                    others = [o for o in range(3) if o != ax]
                    w_o = np.ones(dot.shape)
                    for o in others:
                        w_o = w_o * (frac[..., o] if c[o] == 1 else 1.0 - frac[..., o])
                    gp[..., ax] += sign * w_o * dot
            _accumulate(pts, gp * inside)

    return _result(out, (vol, pts), backward)


def trilinear_sample(vol, pts) -> Tensor:
    """Trilinear interpolation of a (X, Y, Z, C) volume at (N, 3) fractional indices."""
    vol, pts = as_tensor(vol), as_tensor(pts)
    X, Y, Z, C = vol.shape
    out = sample_heads(reshape(vol, (X, Y, Z, 1, C)), reshape(pts, (pts.shape[0], 1, 1, 3)))
    return reshape(out, (pts.shape[0], C))


# ---------------------------------------------------------------- convolution

def neighbor_conv(x, nbr: np.ndarray, w, b=None) -> Tensor:
    """Convolution expressed over an explicit neighbour table.

    ``x`` is (N_in, C_in); ``nbr`` is (N_out, T) holding the input row feeding
    each kernel tap (-1 when absent); ``w`` is (T, C_in, C_out).
    """
    x, w = as_tensor(x), as_tensor(w)
    T, Cin, Cout = w.shape
    if nbr.ndim != 2 or nbr.shape[1] != T or x.shape[1] != Cin:
        raise ShapeError(f"neighbor_conv: x {x.shape}, table {nbr.shape}, weight {w.shape}")
    valid = nbr >= 0
    # absent taps read an appended zero row
    padded = np.concatenate([x.data, np.zeros((1, Cin))], axis=0)
    cols = padded[np.where(valid, nbr, x.shape[0])].reshape(len(nbr), T * Cin)
    w2 = w.data.reshape(T * Cin, Cout)
    out = cols @ w2
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if w.requires_grad:
            _accumulate(w, (cols.T @ g).reshape(w.shape))
        if b is not None:
            _accumulate(b, g.sum(axis=0))
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(len(nbr), T, Cin)
            gx = scatter_add_rows(x.shape[0], nbr[valid], gcols[valid])
            _accumulate(x, gx)

    return _result(out, parents, backward)


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Ordered, seeded collection of :class:`Parameter` objects."""

    def __init__(self, seed: int = 0):
        self.rng_seed = seed
        self._rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def add(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, trainable)
        self.params[name] = p
        return p

    def weight(self, name: str, shape: tuple, fan_in: int | None = None) -> Parameter:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialised weight."""
        fan_in = fan_in if fan_in is not None else int(np.prod(shape[:-1]))
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return self.add(name, self._rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple) -> Parameter:
        return self.add(name, np.zeros(shape))

    def group(self, prefix: str) -> dict[str, Parameter]:
        """Parameters under ``prefix/`` keyed by their remaining name."""
        n = len(prefix) + 1
        return {k[n:]: p for k, p in self.params.items() if k.startswith(prefix + "/")}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state(self, state: dict) -> None:
        for k, v in state.items():
            if k in self.params:
                self.params[k].value = v

    def save(self, path, extra: dict | None = None) -> None:
        arrays = OrderedDict((k, p.data) for k, p in self.params.items())
        if extra:
            arrays.update(extra)
        write_checkpoint(path, arrays)

    def load(self, path) -> dict[str, np.ndarray]:
        """Load matching parameters; returns the records that are not parameters."""
        arrays = read_checkpoint(path)
        rest = {}
        for k, v in arrays.items():
            if k in self.params:
                self.params[k].value = v
            else:
                rest[k] = v
        return rest


# ---------------------------------------------------------------- checkpoint files

CHECKPOINT_MAGIC = b"ROCCPAR1"


def write_checkpoint(path, arrays: "dict[str, np.ndarray]") -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    pos = 8
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    while pos < len(raw):
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return out


# ---------------------------------------------------------------- gradient checking

def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float | Sequence[float] = 1e-5,
               coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call. With
    ``coords`` set, only that many randomly chosen coordinates per input are
    probed; otherwise every coordinate is.

    ``h`` may list several step sizes; each coordinate then scores its best
    agreement. Large networks need this: a big step straddles ReLU kinks and
    a small one drowns weak gradients in round-off, while a wrong backward
    disagrees at every step.
    """
    steps = [float(h)] if np.isscalar(h) else [float(v) for v in h]
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data) if isinstance(t, Parameter) else None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, (t, ga) in enumerate(zip(inputs, analytic)):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        bad = np.flatnonzero(~np.isfinite(ga.reshape(-1)))
        if bad.size:
            raise GradientCheckError(i, np.unravel_index(bad[0], t.shape), "non-finite analytic gradient")
        probe = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            probe = rng.choice(flat.size, size=coords, replace=False)
        for j in probe:
            a = ga.reshape(-1)[j]
            best = math.inf
            for step in steps:
                old = flat[j]
                flat[j] = old + step
                fp = float(fn().data)
                flat[j] = old - step
                fm = float(fn().data)
                flat[j] = old
                num = (fp - fm) / (2 * step)
                best = min(best, abs(a - num) / max(1e-8, abs(num)))
            worst = max(worst, best)
    return worst


def parameters_of(items: Iterable) -> list[Parameter]:
    return [p for p in items if isinstance(p, Parameter)]
