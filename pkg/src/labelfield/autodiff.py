"""Reverse-mode automatic differentiation over numpy arrays.

A Tape records operations in creation order, which is a valid topological
order of the graph, so backward() is a single reverse sweep over a flat
list.  With no active tape, the same ops run in inference mode: values are
computed but no parents or closures are kept, so memory stays flat.

Reductions accumulate in float64 and cast back to the operand dtype, which
keeps gradient checks tight without forcing the whole model to 64 bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ParseError

__all__ = [
    "Tensor",
    "Tape",
    "recording",
    "constant",
    "ParamStore",
    "StackSpec",
    "init_dense_stack",
    "apply_dense_stack",
    "adam_step",
    "softmax_rows",
    "finite_diff_gradcheck",
    "save_checkpoint",
    "load_checkpoint",
]

_ACTIVE_TAPE = None


class Tape:
    """Forward-ordered list of recorded tensors."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []


class recording:
    """Context manager that makes `tape` the active recording target."""

    def __init__(self, tape):
        self.tape = tape
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self.tape
        return self.tape

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


class Tensor:
    """Array node in the computation graph.

    `requires` marks whether any parameter feeds this node.  Nodes are only
    recorded on the active tape when they require gradients, so constant
    subgraphs cost nothing at backward time.
    """

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires")

    def __init__(self, data, parents=(), backward_fn=None, requires=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        if requires is None:
            requires = any(p.requires for p in parents)
        tape = _ACTIVE_TAPE
        if tape is not None and requires and backward_fn is not None:
            self.parents = parents
            self.backward_fn = backward_fn
            self.requires = True
            tape.nodes.append(self)
        else:
            self.parents = ()
            self.backward_fn = None
            self.requires = requires and backward_fn is None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires={self.requires})"


def constant(x, dtype=None):
    """Wrap an array as a non-differentiable graph input."""
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr, requires=False)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    # Bare python scalars adopt the dtype of the tensor they combine with,
    # mirroring numpy's weak-scalar promotion; wrapping them as 0-d float64
    # arrays would silently promote float32 graphs to float64.
    if like is not None and isinstance(x, (bool, int, float)):
        return constant(np.asarray(x, dtype=like.data.dtype))
    return constant(x)


def _pair(a, b):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    return _as_tensor(a, like=tb), _as_tensor(b, like=ta)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def detach(x):
    """Value copy that blocks gradient flow."""
    return Tensor(x.data, requires=False)


def add(a, b):
    a, b = _pair(a, b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)
    out_data = a.data - b.data

    def bw(g):
        if a.requires:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires:
            b.accumulate(-_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), bw)


def scale(a, s):
    a = _as_tensor(a)
    out_data = a.data * s

    def bw(g):
        a.accumulate(g * s)

    return Tensor(out_data, (a,), bw)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data @ b.data

    def bw(g):
        if a.requires:
            a.accumulate(g @ b.data.T)
        if b.requires:
            b.accumulate(a.data.T @ g)

    return Tensor(out_data, (a, b), bw)


def relu(a):
    out_data = np.maximum(a.data, 0)

    def bw(g):
        a.accumulate(g * (a.data > 0))

    return Tensor(out_data, (a,), bw)


def softplus(a):
    out_data = np.logaddexp(0, a.data)

    def bw(g):
        a.accumulate(g * _sigmoid(a.data))

    return Tensor(out_data, (a,), bw)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out_data = _sigmoid(a.data)

    def bw(g):
        a.accumulate(g * out_data * (1.0 - out_data))

    return Tensor(out_data, (a,), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        a.accumulate(g * out_data)

    return Tensor(out_data, (a,), bw)


def square(a):
    out_data = a.data * a.data

    def bw(g):
        a.accumulate(g * (2.0 * a.data))

    return Tensor(out_data, (a,), bw)


def log(a):
    out_data = np.log(a.data)

    def bw(g):
        a.accumulate(g / a.data)

    return Tensor(out_data, (a,), bw)


def reshape(a, shape):
    out_data = a.data.reshape(shape)
    in_shape = a.data.shape

    def bw(g):
        a.accumulate(g.reshape(in_shape))

    return Tensor(out_data, (a,), bw)


def concat(parts, axis=-1):
    parts = [_as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    widths = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate(g[tuple(idx)])

    return Tensor(out_data, tuple(parts), bw)


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims)
    out_data = out_data.astype(a.data.dtype)

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate(np.broadcast_to(gg, a.data.shape))

    return Tensor(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum_exclusive(a, axis=-1):
    """y_i = sum_{j < i} x_j along `axis`."""
    inc = np.cumsum(a.data, axis=axis, dtype=np.float64)
    out_data = (inc - a.data).astype(a.data.dtype)

    def bw(g):
        tail = np.flip(np.cumsum(np.flip(g, axis), axis=axis, dtype=np.float64), axis)
        a.accumulate((tail - g).astype(a.data.dtype))

    return Tensor(out_data, (a,), bw)


def take_rows(a, idx):
    """Row gather: out[k] = a[idx[k]].  idx is a constant integer array."""
    idx = np.asarray(idx)
    out_data = a.data[idx]
    n_rows = a.data.shape[0]

    def bw(g):
        acc = np.zeros(a.data.shape, dtype=np.float64)
        flat_idx = idx.ravel()
        gf = g.reshape(flat_idx.size, -1)
        for c in range(gf.shape[1]):
            acc[:, c] = np.bincount(flat_idx, weights=gf[:, c], minlength=n_rows)
        a.accumulate(acc.astype(a.data.dtype))

    return Tensor(out_data, (a,), bw)


def take_along_last(a, idx):
    """out[..., 0] = a[..., idx[...]] for integer idx with a's leading shape."""
    idx = np.asarray(idx)
    out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)

    def bw(g):
        acc = np.zeros_like(a.data)
        np.put_along_axis(acc, idx[..., None], g, axis=-1)
        a.accumulate(acc)

    return Tensor(out_data, (a,), bw)


def repeat_rows(a, k):
    """Repeat each leading row k times (for per-ray values used per sample)."""
    out_data = np.repeat(a.data, k, axis=0)
    n = a.data.shape[0]

    def bw(g):
        red = g.reshape((n, k) + g.shape[1:]).sum(axis=1, dtype=np.float64)
        a.accumulate(red.astype(a.data.dtype))

    return Tensor(out_data, (a,), bw)


def weighted_gather(table, idx, weights):
    """out[n] = sum_j weights[n, j] * table[idx[n, j]].

    idx (N, J) and weights (N, J) are constants; gradients flow to the table
    only.  Backward scatters with bincount per feature column, which is the
    fast path for large tables.
    """
    idx = np.asarray(idx)
    w = np.asarray(weights)
    out_data = np.einsum("nj,njf->nf", w, table.data[idx], optimize=True)
    out_data = out_data.astype(table.data.dtype)
    n_rows = table.data.shape[0]

    def bw(g):
        contrib = g[:, None, :] * w[:, :, None]
        flat_idx = idx.ravel()
        cf = contrib.reshape(flat_idx.size, -1)
        acc = np.zeros(table.data.shape, dtype=np.float64)
        for c in range(cf.shape[1]):
            acc[:, c] = np.bincount(flat_idx, weights=cf[:, c], minlength=n_rows)
        table.accumulate(acc.astype(table.data.dtype))

    return Tensor(out_data, (table,), bw)


def softmax(a, axis=-1):
    out_data = _softmax_np(a.data, axis)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate(out_data * (g - dot))

    return Tensor(out_data, (a,), bw)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64))
    out_data = (shifted - lse).astype(a.data.dtype)

    def bw(g):
        sm = np.exp(out_data)
        a.accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return Tensor(out_data, (a,), bw)


def _softmax_np(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_rows(logits):
    """Numerically stable softmax over the last axis of a plain array.

    Raises NumericError on non-finite input; uniform rows stay uniform and
    shifting a row by a constant leaves its output unchanged.
    """
    x = np.asarray(logits)
    if not np.isfinite(x).all():
        raise NumericError("softmax_rows: non-finite logits")
    return _softmax_np(x, axis=-1)


def backward(tape, loss):
    """Reverse sweep seeding d(loss)/d(loss) = 1.

    Raises RuntimeError when called without a recorded forward pass or with
    a loss that is not on the tape.
    """
    if not tape.nodes:
        raise RuntimeError("backward before forward: tape is empty")
    if loss.backward_fn is None and not loss.requires:
        raise RuntimeError("loss is not connected to any parameter")
    if loss.data.size != 1:
        raise ConfigError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node.backward_fn is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# Parameters and optimizer


@dataclass
class _Param:
    tensor: Tensor
    m: np.ndarray
    v: np.ndarray
    trainable: bool = True


class ParamStore:
    """Named parameter blocks with Adam moment state.

    One store owns all parameters of a model.  `dtype` is float32 for
    production and float64 for gradient verification.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.blocks: dict[str, _Param] = {}
        self.step_count = 0

    def create(self, name, array, trainable=True):
        if name in self.blocks:
            raise ConfigError(f"parameter block {name!r} already exists")
        arr = np.array(array, dtype=self.dtype)
        t = Tensor(arr, requires=trainable)
        self.blocks[name] = _Param(t, np.zeros_like(arr), np.zeros_like(arr), trainable)
        return t

    def get(self, name):
        try:
            return self.blocks[name].tensor
        except KeyError:
            raise ConfigError(f"unknown parameter block {name!r}") from None

    def __contains__(self, name):
        return name in self.blocks

    def names(self):
        return list(self.blocks)

    def zero_grad(self):
        for p in self.blocks.values():
            p.tensor.grad = None

    def gradients(self):
        """Gradient per block; blocks the loss never reached get zeros."""
        out = {}
        for name, p in self.blocks.items():
            g = p.tensor.grad
            out[name] = np.zeros_like(p.tensor.data) if g is None else g
        return out

    def set_trainable(self, name, flag):
        p = self.blocks[name]
        p.trainable = flag
        p.tensor.requires = flag

    def astype(self, dtype):
        """Copy of this store in another dtype (moments and step included)."""
        other = ParamStore(dtype)
        for name, p in self.blocks.items():
            other.create(name, p.tensor.data.astype(dtype), trainable=p.trainable)
            other.blocks[name].m = p.m.astype(dtype)
            other.blocks[name].v = p.v.astype(dtype)
        other.step_count = self.step_count
        return other


def adam_step(store, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, grads=None):
    """One Adam update with bias correction over all trainable blocks."""
    if grads is None:
        grads = store.gradients()
    store.step_count += 1
    t = store.step_count
    b1, b2 = betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in store.blocks.items():
        if not p.trainable:
            continue
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for block {name!r}")
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * (g * g)
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Dense stacks

_ACTIVATIONS = {"linear": None, "relu": relu, "softplus": softplus, "sigmoid": sigmoid}


@dataclass(frozen=True)
class StackSpec:
    """Widths and per-layer activations of a sequential dense stack."""

    widths: tuple
    activations: tuple

    def __post_init__(self):
        if len(self.widths) != len(self.activations):
            raise ConfigError("widths and activations must have equal length")
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")


def he_uniform(rng, fan_in, shape, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_dense_stack(store, prefix, in_width, spec, rng, zero_last=False, last_bias=0.0):
    """Create weight/bias blocks for a stack under `prefix`.

    Fan-in uniform init; `zero_last` zeroes the final layer's weights and
    sets its bias to `last_bias` (used by the density branch).
    """
    w = in_width
    for i, width in enumerate(spec.widths):
        last = i == len(spec.widths) - 1
        if zero_last and last:
            wmat = np.zeros((w, width), dtype=store.dtype)
            bias = np.full((width,), last_bias, dtype=store.dtype)
        else:
            wmat = he_uniform(rng, w, (w, width), dtype=store.dtype)
            bias = np.zeros((width,), dtype=store.dtype)
        store.create(f"{prefix}.w{i}", wmat)
        store.create(f"{prefix}.b{i}", bias)
        w = width


def apply_dense_stack(store, prefix, x, spec):
    """Run `x` through the stack stored under `prefix`."""
    h = x
    for i, (width, act) in enumerate(zip(spec.widths, spec.activations)):
        w = store.get(f"{prefix}.w{i}")
        b = store.get(f"{prefix}.b{i}")
        if h.data.shape[-1] != w.data.shape[0]:
            raise ConfigError(
                f"{prefix}.w{i}: input width {h.data.shape[-1]} != expected {w.data.shape[0]}"
            )
        h = add(matmul(h, w), b)
        fn = _ACTIVATIONS[act]
        if fn is not None:
            h = fn(h)
    return h


# ---------------------------------------------------------------------------
# Gradient verification


def finite_diff_gradcheck(fn, store, eps=1e-3, max_coords=6, rng=None):
    """Max relative error between analytic and central-difference gradients.

    `fn()` must rebuild the loss from the store's current values and be
    deterministic.  Probes up to `max_coords` coordinates per block.  The
    relative error is |a - fd| / (|a| + |fd| + 1e-8).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    tape = Tape()
    with recording(tape):
        loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("gradcheck: non-finite loss")
    store.zero_grad()
    backward(tape, loss)
    analytic = store.gradients()

    worst = 0.0
    for name, p in store.blocks.items():
        if not p.trainable:
            continue
        flat = p.tensor.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(fn().data)
            flat[c] = orig - eps
            fm = float(fn().data)
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"gradcheck: non-finite value probing {name}[{c}]")
            fd = (fp - fm) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[c])
            rel = abs(a - fd) / (abs(a) + abs(fd) + 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint serialization

_CKPT_MAGIC = b"LFCK"
_CKPT_VERSION = 1


def save_checkpoint(path, store):
    """Write all blocks plus Adam moments and the step counter.

    Payloads are little-endian float32 regardless of the store dtype.
    """
    entries = [("#step", np.asarray([store.step_count], dtype=np.float32))]
    for name, p in store.blocks.items():
        entries.append((name, p.tensor.data))
        entries.append((name + "#m", p.m))
        entries.append((name + "#v", p.v))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<H", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Rebuild a ParamStore from a checkpoint file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC:
        raise ParseError(f"{path}: bad magic {data[:4]!r} at offset 0")
    if len(data) < 12:
        raise ParseError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise ParseError(f"{path}: unsupported version {version} at offset 4")
    off = 12
    blocks = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<H", data, off)
            off += 2
            shape = []
            for _ in range(ndim):
                (d,) = struct.unpack_from("<I", data, off)
                off += 4
                shape.append(d)
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
        except (struct.error, ValueError) as e:
            raise ParseError(f"{path}: truncated block near offset {off}: {e}") from None
        blocks[name] = arr
    store = ParamStore(dtype)
    step = blocks.pop("#step", None)
    for name in list(blocks):
        if "#" in name:
            continue
        store.create(name, blocks[name].astype(dtype))
        p = store.blocks[name]
        if name + "#m" in blocks:
            p.m = blocks[name + "#m"].astype(dtype)
        if name + "#v" in blocks:
            p.v = blocks[name + "#v"].astype(dtype)
    if step is not None:
        store.step_count = int(step[0])
    return store
