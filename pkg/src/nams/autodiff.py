"""A small reverse-mode autodiff core over numpy arrays, plus Adam.

Operations run eagerly.  Inside an active :class:`Tape` every operation whose
inputs require gradients is recorded together with its vector-Jacobian
product; ``Tape.backward`` replays the record in reverse.  Outside a tape the
same code paths only compute values, so rendering without a tape costs no
bookkeeping.

Complex tensors follow the conjugate convention: the gradient slot of a
complex value z holds dL/dRe(z) + j dL/dIm(z).  Real inputs receive the real
part of whatever flows back to them.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        if self.value.dtype.kind in "iub":
            self.value = self.value.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value_of(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _needs_grad(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


@dataclass
class _Entry:
    out: Tensor
    inputs: tuple
    vjp: Callable
    op: str


class Tape:
    """Records differentiable operations executed while it is active.

    One tape is owned by one thread; use it as a context manager.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self):
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def backward(self, root: Tensor, grad=None) -> None:
        """Propagate d(root) back through the recorded operations.

        ``root`` must be scalar unless an explicit output gradient is given.
        Gradients accumulate additively into every tensor that requires them.
        """
        if grad is None:
            if root.value.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {root.shape}")
            grad = np.ones_like(root.value, dtype=np.float64)
        _accumulate(root, np.asarray(grad))
        for entry in reversed(self.entries):
            g = entry.out.grad
            if g is None:
                continue
            grads = entry.vjp(g)
            for inp, gi in zip(entry.inputs, grads):
                if gi is not None and _needs_grad(inp):
                    _accumulate(inp, gi)

    def clear(self) -> None:
        self.entries.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.value.dtype.kind != "c" and np.iscomplexobj(g):
        g = g.real
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    # vjps never write into gradients in place, so aliasing is safe
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def record(op: str, value, inputs: Sequence, vjp: Callable):
    """Wrap an eagerly computed value and register its adjoint on the active tape.

    ``vjp(g)`` must return one gradient (or None) per input.  With no tape
    active, or no input requiring gradients, nothing is recorded.
    """
    tape = _active_tape()
    if tape is None or not any(_needs_grad(x) for x in inputs):
        return Tensor(value)
    out = Tensor(value, requires_grad=True)
    tape.entries.append(_Entry(out, tuple(inputs), vjp, op))
    return out


def _fit(g, x):
    """Reduce a broadcast gradient to the shape (and realness) of input x."""
    shape = np.shape(value_of(x))
    g = _unbroadcast(g, shape)
    if not np.iscomplexobj(value_of(x)) and np.iscomplexobj(g):
        g = g.real
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    return record("add", value_of(a) + value_of(b), (a, b), lambda g: (_fit(g, a), _fit(g, b)))


def sub(a, b):
    return record("sub", value_of(a) - value_of(b), (a, b), lambda g: (_fit(g, a), _fit(-g, b)))


def neg(a):
    return record("neg", -value_of(a), (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return record(
        "mul",
        av * bv,
        (a, b),
        lambda g: (
            _fit(g * np.conj(bv), a) if _needs_grad(a) else None,
            _fit(g * np.conj(av), b) if _needs_grad(b) else None,
        ),
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv

    def vjp(g):
        ga = _fit(g / np.conj(bv), a) if _needs_grad(a) else None
        gb = _fit(-g * np.conj(out / bv), b) if _needs_grad(b) else None
        return ga, gb

    return record("div", out, (a, b), vjp)


def reciprocal(a):
    av = value_of(a)
    out = 1.0 / av
    return record("reciprocal", out, (a,), lambda g: (-g * np.conj(out * out),))


def relu(a):
    av = value_of(a)
    out = np.maximum(av, 0.0)
    return record("relu", out, (a,), lambda g: (g * (out > 0),))


def sin(a):
    av = value_of(a)
    return record("sin", np.sin(av), (a,), lambda g: (g * np.conj(np.cos(av)),))


def cos(a):
    av = value_of(a)
    return record("cos", np.cos(av), (a,), lambda g: (-g * np.conj(np.sin(av)),))


def exp(a):
    out = np.exp(value_of(a))
    return record("exp", out, (a,), lambda g: (g * np.conj(out),))


def log(a):
    av = value_of(a)
    return record("log", np.log(av), (a,), lambda g: (g / np.conj(av),))


def log10(a):
    av = value_of(a)
    return record("log10", np.log10(av), (a,), lambda g: (g / (np.conj(av) * math.log(10)),))


def sqrt(a):
    out = np.sqrt(value_of(a))
    return record("sqrt", out, (a,), lambda g: (g / (2 * np.conj(out)),))


def square(a):
    av = value_of(a)
    return record("square", av * av, (a,), lambda g: (2 * g * np.conj(av),))


def abs(a):
    """|a| for real or complex input; the subgradient at 0 is 0."""
    av = value_of(a)
    out = np.abs(av)
    if np.iscomplexobj(av):

        def vjp(g):
            safe = np.where(out > 0, out, 1.0)
            return (g * np.where(out > 0, av / safe, 0.0),)

    else:

        def vjp(g):
            return (g * np.sign(av),)

    return record("abs", out, (a,), vjp)


def clamp_min(a, lo: float):
    av = value_of(a)
    keep = av >= lo
    return record("clamp_min", np.where(keep, av, lo), (a,), lambda g: (g * keep,))


def real(a):
    return record("real", np.real(value_of(a)), (a,), lambda g: (g + 0j,))


def imag(a):
    return record("imag", np.imag(value_of(a)), (a,), lambda g: (1j * g,))


def conj(a):
    return record("conj", np.conj(value_of(a)), (a,), lambda g: (np.conj(g),))


def complex(re, im):
    """re + j*im from two real tensors."""
    return record(
        "complex", value_of(re) + 1j * value_of(im), (re, im), lambda g: (g.real, g.imag)
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def vjp(g):
        ga = _fit(g @ np.conj(np.swapaxes(bv, -1, -2)), a) if _needs_grad(a) else None
        gb = _fit(np.conj(np.swapaxes(av, -1, -2)) @ g, b) if _needs_grad(b) else None
        return ga, gb

    return record("matmul", av @ bv, (a, b), vjp)


def affine(x, w, b):
    """x @ w + b for a batch of row vectors."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    if xv.shape[-1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise ValueError(f"affine shape mismatch x{xv.shape} w{wv.shape} b{bv.shape}")

    def vjp(g):
        gx = g @ wv.T if _needs_grad(x) else None
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if _needs_grad(w) else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if _needs_grad(b) else None
        return gx, gw, gb

    return record("affine", xv @ wv + bv, (x, w, b), vjp)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record("sum", av.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def l2norm(a, axis=None, keepdims: bool = False):
    """sqrt(sum |a|^2); gradient taken as 0 where the norm vanishes."""
    av = value_of(a)
    out = np.sqrt(np.sum(np.abs(av) ** 2, axis=axis, keepdims=keepdims))

    def vjp(g):
        n = out if (axis is None or keepdims) else np.expand_dims(out, axis)
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gg * av / safe, 0.0),)

    return record("l2norm", out, (a,), vjp)


def rcumsum(a):
    """Reverse cumulative sum along the last axis: y[t] = sum_{s>=t} a[s]."""
    av = value_of(a)
    out = np.flip(np.cumsum(np.flip(av, -1), axis=-1), -1)
    return record("rcumsum", out, (a,), lambda g: (np.cumsum(g, axis=-1),))


# ---------------------------------------------------------------- shape


def reshape(a, shape):
    av = value_of(a)
    return record("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, index):
    av = value_of(a)

    def vjp(g):
        out = np.zeros(av.shape, dtype=np.result_type(av, g))
        np.add.at(out, index, g)
        return (out,)

    return record("slice", av[index], (a,), vjp)


def concat(parts: Sequence, axis: int = -1):
    values = [value_of(p) for p in parts]
    sizes = [v.shape[axis] for v in values]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", np.concatenate(values, axis=axis), tuple(parts), vjp)


def stack(parts: Sequence, axis: int = -1):
    return concat([reshape(p, _expand_shape(value_of(p).shape, axis)) for p in parts], axis=axis)


def _expand_shape(shape, axis):
    shape = list(shape)
    axis = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(axis, 1)
    return tuple(shape)


def frames(a, fft_size: int, hop: int):
    """Overlapping frames of a 1-D signal with zero padding past its end."""
    av = value_of(a)
    n = len(av)
    count = 1 if n < fft_size else (n - fft_size) // hop + 1
    idx = np.arange(count)[:, None] * hop + np.arange(fft_size)[None, :]
    valid = idx < n
    safe = np.where(valid, idx, 0)
    out = np.where(valid, av[safe], 0.0)

    def vjp(g):
        gx = np.zeros(n, dtype=g.dtype)
        np.add.at(gx, safe[valid], g[valid])
        return (gx,)

    return record("frames", out, (a,), vjp)


# ---------------------------------------------------------------- Fourier


_DFT_CACHE: dict = {}
_MATRIX_DFT_MAX_LEN = 256


def _dft_matrix(length: int, n: int) -> np.ndarray:
    """[length, 2*(n//2+1)] with cos/sin columns interleaved, so that
    ``x @ M`` viewed as complex128 is the one-sided DFT of x."""
    key = (length, n)
    if key not in _DFT_CACHE:
        t = np.arange(length)[:, None]
        k = np.arange(n // 2 + 1)[None, :]
        ang = -2 * np.pi * ((t * k) % n) / n
        m = np.empty((length, 2 * (n // 2 + 1)))
        m[:, 0::2] = np.cos(ang)
        m[:, 1::2] = np.sin(ang)
        _DFT_CACHE[key] = (m, np.ascontiguousarray(m.T))
    return _DFT_CACHE[key]


def dft(a, n: int):
    """One-sided DFT along the last axis after zero-padding to n samples.

    Short inputs go through a cached real DFT matrix, which beats a padded FFT.
    """
    av = value_of(a)
    length = av.shape[-1]
    if length > n:
        raise ValueError(f"signal length {length} exceeds transform length {n}")
    if length <= _MATRIX_DFT_MAX_LEN and av.ndim == 2 and av.dtype.kind == "f":
        mat, mat_t = _dft_matrix(length, n)
        out = (av @ mat).view(np.complex128)

        def vjp(g):
            g = np.ascontiguousarray(g, dtype=np.complex128)
            return (g.view(np.float64) @ mat_t,)

        return record("dft", out, (a,), vjp)

    def vjp(g):
        y = np.array(g, dtype=np.complex128) * (n / 2)
        y[..., 0] = g[..., 0].real * n
        if n % 2 == 0:
            y[..., -1] = g[..., -1].real * n
        return (np.fft.irfft(y, n=n, axis=-1)[..., :length],)

    return record("dft", np.fft.rfft(av, n=n, axis=-1), (a,), vjp)


def idft(a, n: int):
    """Real inverse of a one-sided spectrum (imaginary DC/Nyquist parts are dropped)."""
    av = value_of(a)

    def vjp(g):
        y = np.fft.rfft(g, n=n, axis=-1) * (2.0 / n)
        y[..., 0] = y[..., 0].real / 2
        if n % 2 == 0:
            y[..., -1] = y[..., -1].real / 2
        return (y,)

    return record("idft", np.fft.irfft(av, n=n, axis=-1), (a,), vjp)


# ---------------------------------------------------------------- parameters


@dataclass
class ParamStore:
    """Named trainable tensors with Adam moment buffers."""

    params: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.value)
        self.v[name] = np.zeros_like(t.value)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict:
        """Gradient per parameter; parameters never reached get zeros."""
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for k, t in self.params.items()
        }

    def select_rows(self, name: str, keep) -> None:
        """Keep only the given rows of a parameter and of its moments."""
        t = self.params[name]
        t.value = t.value[keep].copy()
        t.grad = None if t.grad is None else t.grad[keep].copy()
        self.m[name] = self.m[name][keep].copy()
        self.v[name] = self.v[name][keep].copy()

    def num_values(self) -> int:
        return int(np.sum([t.value.size for t in self.params.values()]))


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update over every parameter, then clear gradients."""
    grads = store.grads()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    store.step += 1
    c1 = 1 - beta1**store.step
    c2 = 1 - beta2**store.step
    for name, g in grads.items():
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p = store.params[name]
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()


def cosine_lr(epoch: float, lr_max: float = 1e-3, lr_min: float = 1e-4, epochs: int = 300) -> float:
    if epochs <= 1:
        return lr_max
    if not 0 <= epoch <= epochs - 1:
        raise ValueError(f"epoch {epoch} outside 0..{epochs - 1}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * epoch / (epochs - 1)))
