"""Dense tensors with reverse-mode differentiation on an explicit tape.

Every value in this package is a `Tensor`: an immutable, row-major numpy
buffer plus a node id. Differentiable primitives record an entry on the
active `Tape` (when one is open); `backward` replays the tape in reverse
and accumulates gradients in fixed tape order, so runs are deterministic.

float32 is the working dtype for training and inference; float64 is used
by the finite-difference checker. uint8 exists only so the MTEN container
can carry 8-bit image payloads; arithmetic on uint8 tensors is rejected.

Canonical feature layout is N x C x T x H x W. Lower-rank tensors are
plain arrays; nothing here implies leading axes.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class FormatError(ValueError):
    """Malformed or truncated MTEN/MWTS byte stream."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_ALLOWED_DTYPES = _FLOAT_DTYPES + (np.dtype(np.uint8),)

_ids = itertools.count()


class Tensor:
    """Immutable dense array with a unique node id.

    Construct through `tensor_new` / `as_tensor`; operations never mutate
    the underlying buffer (it is marked read-only).
    """

    __slots__ = ("data", "id")

    def __init__(self, data: np.ndarray):
        arr = np.ascontiguousarray(data)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype}")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        self.data = arr
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # -- convenience operators; all route through the recorded primitives --
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims: bool = False):
        return tensor_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return tensor_mean(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def tensor_new(shape: Sequence[int], fill, dtype=np.float32) -> Tensor:
    """Build a tensor of `shape` from a fill scalar or a flat buffer."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("rank-0 tensors are not supported; use shape (1,)")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    n = int(np.prod(shape))
    if np.isscalar(fill):
        data = np.full(shape, fill, dtype=dtype)
    else:
        buf = np.asarray(fill, dtype=dtype).ravel()
        if buf.size != n:
            raise ShapeError(f"buffer length {buf.size} != product(shape) {n}")
        data = buf.reshape(shape)
    return Tensor(data)


def as_tensor(values, dtype=None) -> Tensor:
    """Wrap array-likes; without an explicit dtype, numeric input lands in
    the float32 working dtype (pass float64 for gradient checking)."""
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype != np.uint8:
        arr = arr.astype(np.float32)
    return Tensor(arr)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    """One recorded primitive: op name, input/output node ids, and the
    backward rule (maps the output gradient to per-input gradients)."""

    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Entries are appended in execution order, so the record is already
    topologically sorted. Single-writer: one logical thread records and
    backpropagates a given tape.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.entries)


_tape_stack: list[Tape] = []


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
    """Record a primitive on the active tape, if one is open."""
    tape = active_tape()
    if tape is not None:
        tape.entries.append(
            TapeEntry(op, tuple(t.id for t in inputs), output.id, backward_fn)
        )


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar `loss` for each named parameter.

    Parameters not reachable from the loss get zero gradients of their own
    shape. Accumulation follows reverse tape order exactly, so results are
    bit-reproducible.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g_out = grads.pop(entry.output, None)
        if g_out is None:
            continue
        g_inputs = entry.backward(g_out)
        for tid, g in zip(entry.inputs, g_inputs):
            if g is None:
                continue
            acc = grads.get(tid)
            grads[tid] = g if acc is None else acc + g
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(p.id)
        out[name] = Tensor(g.copy()) if g is not None else zeros_like(p)
    return out


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def _require_float(t: Tensor, op: str) -> None:
    if t.dtype not in _FLOAT_DTYPES:
        raise ValueError(f"{op} requires a float tensor, got {t.dtype}")


def _coerce(other, like: Tensor) -> Tensor:
    if isinstance(other, Tensor):
        return other
    if np.isscalar(other):
        return Tensor(np.full((1,), other, dtype=like.dtype))
    raise TypeError(f"cannot combine Tensor with {type(other)!r}")


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    """Identical shapes, or scalar-tensor; no other implicit broadcasting."""
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape == b.shape:
        return a.shape
    if a.size == 1 or b.size == 1:
        return a.shape if b.size == 1 else b.shape
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # Undo the scalar-tensor broadcast on the way back.
    if g.shape == t.shape:
        return g
    return np.sum(g, dtype=g.dtype).reshape(t.shape)


def _binary(op_name: str, a, b, fwd, bwd_a, bwd_b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    b = _coerce(b, a)
    _require_float(a, op_name)
    _binary_shapes(a, b, op_name)
    out = Tensor(fwd(a.data, b.data))
    ad, bd = a.data, b.data

    def _backward(g):
        return (_reduce_to(bwd_a(g, ad, bd), a), _reduce_to(bwd_b(g, ad, bd), b))

    record(op_name, (a, b), out, _backward)
    return out


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        "div", a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def _unary(op_name: str, x: Tensor, fwd, bwd) -> Tensor:
    _require_float(x, op_name)
    out = Tensor(fwd(x.data))
    xd, od = x.data, out.data

    def _backward(g):
        return (bwd(g, xd, od),)

    record(op_name, (x,), out, _backward)
    return out


def neg(x: Tensor) -> Tensor:
    return _unary("neg", x, np.negative, lambda g, xd, od: -g)


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0.
    return _unary("relu", x, lambda d: np.maximum(d, 0), lambda g, xd, od: g * (xd > 0))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative input")
    return _unary("sqrt", x, np.sqrt, lambda g, xd, od: g * 0.5 / od)


def square(x: Tensor) -> Tensor:
    return _unary("square", x, np.square, lambda g, xd, od: g * 2.0 * xd)


def exp(x: Tensor) -> Tensor:
    return _unary("exp", x, np.exp, lambda g, xd, od: g * od)


def expm1(x: Tensor) -> Tensor:
    return _unary("expm1", x, np.expm1, lambda g, xd, od: g * (od + 1.0))


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x), overflow-safe; derivative is the logistic sigmoid.
    def fwd(d):
        return np.logaddexp(np.zeros((), dtype=d.dtype), d)

    def bwd(g, xd, od):
        z = np.empty_like(xd)
        pos = xd >= 0
        z[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        e = np.exp(xd[~pos])
        z[~pos] = e / (1.0 + e)
        return g * z

    return _unary("softplus", x, fwd, bwd)


_ELEMENTWISE = {
    "add": (add, 2),
    "sub": (sub, 2),
    "mul": (mul, 2),
    "div": (div, 2),
    "relu": (relu, 1),
    "sqrt": (sqrt, 1),
    "square": (square, 1),
    "exp": (exp, 1),
    "neg": (neg, 1),
    "softplus": (softplus, 1),
}


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    fn, arity = _ELEMENTWISE[op_kind]
    if arity == 2:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op_kind} takes one operand")
    return fn(a)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select a where mask else b. The mask is a plain boolean array and is
    treated as constant; gradients route to the selected branch only."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape or a.shape != b.shape:
        raise ShapeError(f"where: shapes {mask.shape}/{a.shape}/{b.shape} differ")
    out = Tensor(np.where(mask, a.data, b.data))

    def _backward(g):
        return (g * mask, g * ~mask)

    record("where", (a, b), out, _backward)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; pass-through gradient inside the closed interval."""
    out = Tensor(np.clip(x.data, lo, hi))
    xd = x.data

    def _backward(g):
        return (g * ((xd >= lo) & (xd <= hi)),)

    record("clamp", (x,), out, _backward)
    return out


# ---------------------------------------------------------------------------
# Shape and reduction primitives
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def tensor_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    _require_float(x, "sum")
    ax = _norm_axes(axes, x.data.ndim)
    out_data = np.sum(x.data, axis=ax, keepdims=keepdims)
    if out_data.ndim == 0:
        out_data = out_data.reshape(1)
    out = Tensor(out_data)
    in_shape = x.shape

    def _backward(g):
        gk = g
        if not keepdims:
            kshape = tuple(1 if i in ax else s for i, s in enumerate(in_shape))
            gk = g.reshape(kshape)
        return (np.broadcast_to(gk, in_shape).copy(),)

    record("sum", (x,), out, _backward)
    return out


def tensor_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.data.ndim)
    n = int(np.prod([x.shape[i] for i in ax]))
    return mul(tensor_sum(x, axes, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape))
    in_shape = x.shape

    def _backward(g):
        return (g.reshape(in_shape),)

    record("reshape", (x,), out, _backward)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes).copy())
    inv = tuple(np.argsort(axes))

    def _backward(g):
        return (np.transpose(g, inv).copy(),)

    record("transpose", (x,), out, _backward)
    return out


def flip(x: Tensor, axis: int) -> Tensor:
    out = Tensor(np.flip(x.data, axis).copy())

    def _backward(g):
        return (np.flip(g, axis).copy(),)

    record("flip", (x,), out, _backward)
    return out


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicitly expand size-1 axes to `shape` (rank must match)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.data.ndim:
        raise ShapeError(f"broadcast_to: rank {x.data.ndim} != target rank {len(shape)}")
    expanded = tuple(
        i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t
    )
    if any(x.shape[i] != 1 for i in expanded):
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    out = Tensor(np.broadcast_to(x.data, shape).copy())

    def _backward(g):
        return (np.sum(g, axis=expanded, keepdims=True) if expanded else g,)

    record("broadcast_to", (x,), out, _backward)
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(piece.copy() for piece in np.split(g, splits, axis=axis))

    record("concat", tuple(parts), out, _backward)
    return out


def slice_(x: Tensor, slices: tuple[slice, ...]) -> Tensor:
    """Basic slicing with unit steps; gradient scatters back into zeros."""
    if any(s.step not in (None, 1) for s in slices):
        raise ValueError("slice_ supports unit steps only")
    out = Tensor(x.data[slices].copy())
    in_shape, in_dtype = x.shape, x.dtype

    def _backward(g):
        gx = np.zeros(in_shape, dtype=in_dtype)
        gx[slices] = g
        return (gx,)

    record("slice", (x,), out, _backward)
    return out


def pad(x: Tensor, pads: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad with (before, after) per axis."""
    pads = tuple((int(b), int(a)) for b, a in pads)
    out = Tensor(np.pad(x.data, pads))
    slices = tuple(slice(b, b + s) for (b, _), s in zip(pads, x.shape))

    def _backward(g):
        return (g[slices].copy(),)

    record("pad", (x,), out, _backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands carry identical leading
    dims, or the right operand is an unbatched 2-D matrix."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs rank >= 2 operands")
    if a.dtype != b.dtype:
        raise ValueError(f"matmul dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims {a.shape} @ {b.shape}")
    if b.data.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    ad, bd = a.data, b.data

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        if bd.ndim == 2 and gb.ndim > 2:
            gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
        return (ga, gb)

    record("matmul", (a, b), out, _backward)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (rows sum to one)."""
    _require_float(x, "softmax")
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(s)
    sd = out.data

    def _backward(g):
        dot = np.sum(g * sd, axis=-1, keepdims=True)
        return (sd * (g - dot),)

    record("softmax", (x,), out, _backward)
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    """Maximum relative error between analytic and central-difference
    gradients, per parameter. Relative error is |a-n| / max(|a|,|n|,1e-8)."""

    eps: float
    threshold: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def failing(self) -> list[str]:
        return sorted(k for k, v in self.per_param.items() if v >= self.threshold)


def _eval_scalar(f, params: Mapping[str, Tensor]) -> float:
    out = f(params)
    if out.size != 1:
        raise ShapeError("finite_diff_check: f must return a scalar tensor")
    v = out.item()
    if not np.isfinite(v):
        raise FloatingPointError(f"finite_diff_check: non-finite value {v}")
    return v


def finite_diff_check(
    f,
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    threshold: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare analytic gradients of `f(params)` with central differences.

    `f` must be a deterministic, pure function of the parameter dict. Run
    in float64; float32 parameters are rejected because the differences
    fall below half precision of the forward value. When `max_coords` is
    set, a random coordinate subset of each parameter is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"finite_diff_check needs float64 params ({name} is {p.dtype})")
    tape = Tape()
    with tape:
        loss = f(params)
    if loss.size != 1:
        raise ShapeError("finite_diff_check: f must return a scalar tensor")
    if not np.isfinite(loss.item()):
        raise FloatingPointError("finite_diff_check: non-finite loss at base point")
    analytic = backward(tape, loss, params)

    rng = rng or np.random.default_rng(0)
    report = GradReport(eps=eps, threshold=threshold)
    for name in sorted(params):
        p = params[name]
        n = p.size
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        worst = 0.0
        a_flat = analytic[name].data.ravel()
        for c in coords:
            plus_arr = p.data.copy()
            plus_arr.ravel()[c] += eps
            f_plus = _eval_scalar(f, {**params, name: Tensor(plus_arr)})
            minus_arr = p.data.copy()
            minus_arr.ravel()[c] -= eps
            f_minus = _eval_scalar(f, {**params, name: Tensor(minus_arr)})
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(a_flat[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report.per_param[name] = worst
    return report


# ---------------------------------------------------------------------------
# MTEN serialization
# ---------------------------------------------------------------------------

_MTEN_MAGIC = b"MTEN"
_MTEN_VERSION = 1
_DTYPE_TO_CODE = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint8): 2,
}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


def mten_write(t: Tensor, sink) -> None:
    """Write the MTEN container: magic, version, dtype, ndim, pad, u64
    little-endian extents, then the row-major little-endian payload."""
    if t.dtype in _FLOAT_DTYPES and not np.all(np.isfinite(t.data)):
        raise ValueError("mten_write: non-finite values")
    code = _DTYPE_TO_CODE[t.dtype]
    header = struct.pack("<4sBBBB", _MTEN_MAGIC, _MTEN_VERSION, code, t.data.ndim, 0)
    sink.write(header)
    sink.write(struct.pack(f"<{t.data.ndim}Q", *t.shape))
    sink.write(t.data.astype(_CODE_TO_DTYPE[code], copy=False).tobytes())


def _read_exact(source, n: int) -> bytes:
    buf = source.read(n)
    if buf is None or len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {0 if buf is None else len(buf)}")
    return buf


def mten_read(source) -> Tensor:
    """Read one MTEN container; the round trip with mten_write is bit-exact."""
    magic, version, code, ndim, padbyte = struct.unpack("<4sBBBB", _read_exact(source, 8))
    if magic != _MTEN_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != _MTEN_VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unsupported dtype code {code}")
    if padbyte != 0:
        raise FormatError("nonzero pad byte")
    if ndim < 1:
        raise FormatError("ndim must be >= 1")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(source, 8 * ndim))
    if any(s < 1 for s in shape):
        raise FormatError(f"invalid extent in {shape}")
    dtype = _CODE_TO_DTYPE[code]
    n = int(np.prod(shape))
    payload = _read_exact(source, n * dtype.itemsize)
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Tensor(data.astype(dtype.newbyteorder("="), copy=True))
