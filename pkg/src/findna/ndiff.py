"""Dense tensors with a recorded tape for reverse-mode gradients.

A :class:`Tape` records every primitive applied to tensors that descend from
``tape.param(...)`` or ``tape.watch(...)``. Calling :meth:`Tape.backward` on a
scalar replays the records in reverse and accumulates gradients into the
:class:`Parameter` objects. A tape built with ``record=False`` evaluates the
same code without recording anything (used for the teacher and for inference).

Shapes are explicit: the only broadcasting allowed is a 1-D bias over the last
axis in :func:`add`, and a 2-D right operand in :func:`matmul`.

Everything is float64 unless :data:`DTYPE` is changed before building models.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels as _k

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tensor:
    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: Tape | None = None, node: int = -1):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


@dataclass
class _Record:
    out: int
    inputs: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of primitive applications for one forward pass."""

    def __init__(self, record: bool = True):
        self.recording = record
        self._records: list[_Record] = []
        self._params: dict[int, Parameter] = {}
        self._watched: dict[int, str] = {}
        self._count = 0
        self.consumed = False

    def __len__(self) -> int:
        return len(self._records)

    def _node(self) -> int:
        self._count += 1
        return self._count

    def param(self, p: Parameter) -> Tensor:
        if not self.recording:
            return Tensor(p.value)
        self._check_open()
        node = self._node()
        self._params[node] = p
        return Tensor(p.value, self, node)

    def watch(self, value: np.ndarray, name: str = "input") -> Tensor:
        """Leaf whose gradient is returned by :meth:`backward` under ``name``."""
        value = np.asarray(value, dtype=DTYPE)
        if not self.recording:
            return Tensor(value)
        self._check_open()
        node = self._node()
        self._watched[node] = name
        return Tensor(value, self, node)

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=DTYPE))

    def _check_open(self):
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record a new forward pass")

    def record(self, value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
        self._check_open()
        node = self._node()
        self._records.append(_Record(node, tuple(t.node if t.tape is self else -1 for t in inputs), vjp))
        return Tensor(value, self, node)

    def backward(self, loss: Tensor, accumulate: bool = True) -> dict[str, np.ndarray]:
        """Propagate d(loss)/d(.) back to every parameter and watched leaf.

        Returns gradients keyed by parameter name (and watched-leaf name).
        With ``accumulate`` the parameter gradients are also added to
        ``Parameter.grad``.
        """
        self._check_open()
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.value)}
        for rec in reversed(self._records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            for node, gi in zip(rec.inputs, rec.vjp(g)):
                if node < 0 or gi is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + gi
                else:
                    grads[node] = gi
        self.consumed = True
        self._records.clear()
        out: dict[str, np.ndarray] = {}
        for node, p in self._params.items():
            g = grads.get(node)
            if g is None:
                g = np.zeros_like(p.value)
            out[p.name] = out[p.name] + g if p.name in out else g
        for p in {id(p): p for p in self._params.values()}.values():
            if accumulate:
                p.grad += out[p.name]
        for node, name in self._watched.items():
            out[name] = grads.get(node, np.zeros(()))
        return out


def _tape_of(*tensors: Tensor) -> Tape | None:
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _emit(value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(value, inputs, vjp)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of shape ``(..., m, k)`` and ``b`` of ``(k, n)`` or ``(..., k, n)``."""
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2] or (bv.ndim > 2 and bv.shape[:-2] != av.shape[:-2]):
        raise DimensionError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _emit(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return _emit(av + bv, (a, b), lambda g: (g, g))
    if bv.ndim == 1 and av.ndim >= 1 and av.shape[-1] == bv.shape[0]:
        return _emit(av + bv, (a, b), lambda g: (g, g.reshape(-1, bv.shape[0]).sum(axis=0)))
    raise DimensionError(f"add: shapes {av.shape} and {bv.shape} differ (only bias broadcasting allowed)")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``(..., k)``, ``w`` of ``(k, n)``, ``b`` of ``(n,)``."""
    xv, wv, bv = x.value, w.value, b.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise DimensionError(f"linear: shapes {xv.shape}, {wv.shape}, {bv.shape}")
    k, n = wv.shape
    x2 = xv.reshape(-1, k)
    out = x2 @ wv
    out += bv
    out = out.reshape(xv.shape[:-1] + (n,))

    def vjp(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ wv.T).reshape(xv.shape) if x.tape is not None else None
        return gx, x2.T @ g2, g2.sum(axis=0)

    return _emit(out, (x, w, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise DimensionError(f"multiply: shapes {av.shape} and {bv.shape} differ")
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def circular_shift(a: Tensor, offset: int, axis: int = 0) -> Tensor:
    """Rotate entries along ``axis`` so that ``out[i] = a[i - offset]``."""
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"circular_shift: axis {axis} out of range for shape {a.shape}")
    return _emit(np.roll(a.value, offset, axis=axis), (a,), lambda g: (np.roll(g, -offset, axis=axis),))


def roll_channels(a: Tensor, offsets: np.ndarray) -> Tensor:
    """Shift every channel (last axis) along the token axis (second to last)
    by its own offset: ``out[..., n, c] = a[..., (n - offsets[c]) mod N, c]``."""
    av = a.value
    offsets = np.asarray(offsets, dtype=np.int64)
    if av.ndim < 2 or offsets.shape != (av.shape[-1],):
        raise DimensionError(f"roll_channels: {offsets.shape} offsets for shape {av.shape}")
    shape = av.shape
    n = shape[-2]
    fwd = offsets % n
    inv = (-offsets) % n

    def roll(x, off):
        x3 = np.ascontiguousarray(x).reshape((-1,) + shape[-2:])
        out = np.empty_like(x3)
        _k.roll_tokens(x3, off, out)
        return out.reshape(shape)

    return _emit(roll(av, fwd), (a,), lambda g: (roll(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    values = [t.value for t in tensors]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _emit(out, tuple(tensors), lambda g: np.split(g, bounds, axis=axis))


def slice_(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise DimensionError(f"slice: [{start}, {stop}) outside axis of length {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _emit(a.value[index], (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _emit(a.value * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = np.ascontiguousarray(a.value)
    out = np.empty_like(x)
    if _tape_of(a) is None:
        _k.gelu_forward(x, out)
        return Tensor(out)
    deriv = np.empty_like(x)
    _k.gelu_forward(x, out, deriv)
    return _emit(out, (a,), lambda g: (g * deriv,))


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis`` (no affine part)."""
    x = a.value
    if axis in (-1, x.ndim - 1):
        rows = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
        xhat = np.empty_like(rows)
        inv = np.empty(rows.shape[0], dtype=rows.dtype)
        _k.layer_norm_forward(rows, xhat, inv, eps)

        def vjp(g):
            out = np.empty_like(xhat)
            _k.layer_norm_backward(np.ascontiguousarray(g).reshape(xhat.shape), xhat, inv, out)
            return (out.reshape(x.shape),)

        return _emit(xhat.reshape(x.shape), (a,), vjp)

    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit(xhat, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    s = np.exp(out)
    return _emit(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise FloatingPointError("log of a nonpositive entry")
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _emit(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.value.sum(axis=axis)
    return _emit(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def dropout(a: Tensor, rate: float, seed: int | np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: identity when not training, ``x * mask / (1 - rate)`` otherwise."""
    if not training or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = _k.dropout_keep_mask(rng, a.shape, rate)
    factor = 1.0 / (1.0 - rate)
    x = np.ascontiguousarray(a.value)
    out = np.empty_like(x)
    _k.masked_scale(x, keep, factor, out)

    def vjp(g):
        gx = np.empty_like(out)
        _k.masked_scale(np.ascontiguousarray(g), keep, factor, gx)
        return (gx,)

    return _emit(out, (a,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self) -> list[str]:
        rows = [f"{name}\t{err:.3e}" for name, err in sorted(self.errors.items(), key=lambda kv: -kv[1])]
        name, err = self.worst
        rows.append(f"worst: {name} {err:.3e} ({'PASS' if self.passed else 'FAIL'} at {self.tolerance:g})")
        return rows


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(loss_fn: Callable[[], float], p: Parameter, h: float = 1e-4) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``p`` (perturbed in place)."""
    grad = np.zeros_like(p.value)
    flat = p.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def grad_check(
    forward: Callable[[Tape], Tensor],
    params: Iterable[Parameter],
    tolerance: float = 1e-5,
    h: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare tape gradients with central finite differences.

    ``forward(tape)`` must build the scalar loss deterministically (dropout off
    or seed-pinned); it is called once with a recording tape and ``2 * n``
    times with a non-recording one.
    """
    params = list(params)
    tape = Tape()
    analytic = tape.backward(forward(tape), accumulate=False)
    plain = Tape(record=False)

    def loss_value() -> float:
        return float(forward(plain).value)

    report = GradCheckReport(tolerance)
    for p in params:
        report.errors[p.name] = relative_error(analytic[p.name], numeric_gradient(loss_value, p, h), floor)
    return report


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-D parameters (biases)."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and p.value.ndim > 1:
                p.value *= 1.0 - lr * self.weight_decay
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (little-endian):
#   magic  b"FNDNACKP"          8 bytes
#   version                     uint8 (=1)
#   meta_len, meta              uint32, UTF-8 JSON object
#   count                       uint32
#   count x entry:
#     name_len, name            uint16, UTF-8
#     ndim, dims                uint8, ndim x uint64
#     data                      prod(dims) x float64

MAGIC = b"FNDNACKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(value, dtype="<f8").copy(order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if data[8] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {data[8]}")
    pos = 9
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            ndim = data[pos]
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            tensors[name] = arr.astype(DTYPE)
    except (struct.error, ValueError, IndexError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from None
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return tensors, meta
