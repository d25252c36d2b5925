"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Everything the regression network needs is composed from a small closed set
of primitives (matmul, add, scale, mul, relu, gelu, softmax_lastdim,
layer_norm, mean, concat_lastdim, transpose, reshape). Each primitive checks
its output for NaN/Inf and raises :class:`NonFiniteError` instead of letting
bad values propagate.

Usage::

    with Tape() as tape:
        loss = mean(mul(x, x))
    grads = tape.backward(loss)   # {leaf tensor: ndarray}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}


class NumericsError(Exception):
    pass


class NonFiniteError(NumericsError, FloatingPointError):
    pass


class ShapeError(NumericsError, ValueError):
    pass


class TapeError(NumericsError, RuntimeError):
    pass


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    """Immutable n-d array. ``requires_grad`` marks a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "_node")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=resolve_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.flags.writeable or not arr.flags.c_contiguous:
            # never freeze the caller's buffer
            arr = arr.copy(order="C")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying."""
        t = cls.__new__(cls)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr) if arr.ndim else arr.copy()
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications; replayable backward once."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        if self._used:
            raise TapeError("tape already consumed by backward()")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, node: _Node) -> None:
        if self._used:
            raise TapeError("cannot record onto a tape after backward()")
        self.nodes.append(node)

    def backward(self, loss: Tensor, seed: float = 1.0) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from scalar ``loss``; returns gradients for every leaf
        that requires grad and took part in the forward pass."""
        if self._used:
            raise TapeError("backward() called twice on one tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, seed, dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    leaves[id(t)] = t
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if loss._node is None and loss.requires_grad:
            leaves[id(loss)] = loss
        return {leaves[k]: grads[k] for k in leaves if k in grads}


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(out: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(out, op)
    t = Tensor._wrap(np.asarray(out))
    tape = _active_tape()
    if tape is not None and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        node = _Node(t, inputs, backward)
        t._node = node
        tape.record(node)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        if b.requires_grad:
            if B.ndim == 2 and A.ndim > 2:
                # weight gradient: fold the batch axes into one matrix product
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _make(A @ B, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * B, A.shape) if a.requires_grad else None
        gb = _unbroadcast(g * A, B.shape) if b.requires_grad else None
        return ga, gb

    return _make(A * B, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), "relu", (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation, as in GPT-2."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * d,)

    return _make(out.astype(a.dtype), "gelu", (a,), backward)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) zeroes excluded entries
    exactly, which is the -inf-before-softmax convention without ever
    materializing an infinity. Every row must keep at least one entry.
    """
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s.astype(x.dtype), "softmax_lastdim", (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean)/sqrt(var + eps) * gamma + beta over the last axis."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm affine params must have shape ({n},)")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, G.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, G.shape) if beta.requires_grad else None
        return gx, gg, gb

    out = (xhat * G + beta.data).astype(x.dtype)
    return _make(out, "layer_norm", (x, gamma, beta), backward)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    X = x.data
    out = X.mean(axis=axis, keepdims=keepdims)
    ax = tuple(range(X.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    ax = tuple(a % X.ndim for a in ax)
    count = int(np.prod([X.shape[a] for a in ax])) if ax else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, X.shape).astype(X.dtype),)

    return _make(np.asarray(out, dtype=X.dtype), "mean", (x,), backward)


def concat_lastdim(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat of nothing")
    lead = xs[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in xs):
        raise ShapeError("concat_lastdim: leading shapes differ")
    widths = [t.shape[-1] for t in xs]
    cuts = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _make(np.concatenate([t.data for t in xs], axis=-1), "concat_lastdim", xs, backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    nd = x.data.ndim
    if axes is None:
        if nd < 2:
            raise ShapeError("transpose needs ≥2-d input")
        axes = list(range(nd - 2)) + [nd - 1, nd - 2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- gradient oracle


def finite_diff(f: Callable[[dict[str, np.ndarray]], float], theta: dict[str, np.ndarray],
                epsilon: float = 1e-5, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate of scalar ``f`` at ``theta``.

    ``theta`` maps names to float64 arrays; ``f`` receives a perturbed copy.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    out = {}
    for name in (names if names is not None else base):
        arr = base[name]
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f(base)
            flat[i] = orig - epsilon
            fm = f(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * epsilon)
        out[name] = grad
    return out


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor], **kw) -> "AdamState":
        m = {k: np.zeros(p.shape, dtype=p.dtype) for k, p in params.items()}
        v = {k: np.zeros(p.shape, dtype=p.dtype) for k, p in params.items()}
        return cls(m=m, v=v, **kw)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              eta: float, lam: float = 0.0) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update on the names present in ``grads``.

    Weight decay is classic L2: ``2*lam*theta`` is added to each gradient, the
    derivative of ``lam * ||theta||^2`` in the loss. Parameters absent from
    ``grads`` (frozen) are returned unchanged and their moments untouched.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        theta = p.data
        if lam:
            g = g + (2.0 * lam) * theta
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        upd = eta * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_theta = (theta - upd).astype(theta.dtype)
        _check_finite(new_theta, "adam_step")
        new_params[name] = Tensor(new_theta, requires_grad=p.requires_grad)
        new_m[name] = m.astype(theta.dtype)
        new_v[name] = v.astype(theta.dtype)
    return new_params, AdamState(m=new_m, v=new_v, t=t, beta1=b1, beta2=b2, eps=state.eps)
