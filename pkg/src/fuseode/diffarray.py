"""Rank-3 float64 tensors with a small reverse-mode autodiff kernel.

Every tensor is (channels, height, width).  Ops build a graph on the fly;
:func:`backward` linearises that graph into a :class:`GradTape` and replays
it in reverse.  There is no global tape, so independent graphs can be built
and differentiated from different threads.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "DimensionError",
    "ContractError",
    "tensor",
    "zeros",
    "channel_project",
    "resize_bilinear",
    "pointwise",
    "weighted_sum",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "tsum",
    "tmean",
    "backward",
    "finite_diff_grad",
    "save_tensor",
    "load_tensor",
    "ACTIVATIONS",
]


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an op."""


class ContractError(ValueError):
    """Raised when an op is called outside its contract."""


class Tensor:
    """Immutable (C, H, W) float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), vjp=None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise DimensionError(f"expected a rank-3 array, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._vjp = vjp

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], vjp) -> "Tensor":
        # Skip the copy in __init__; op outputs are fresh arrays.
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        tracked = any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out.op = op
        out._parents = tuple(parents) if tracked else ()
        out._vjp = vjp if tracked else None
        return out

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- core ops


def channel_project(x: Tensor, weight, bias=None) -> Tensor:
    """Per-pixel linear map over channels (a 1x1 convolution).

    ``weight`` is a (C_out, C) matrix or a (C_out, C, 1) tensor; ``bias`` a
    length-C_out vector or a (C_out, 1, 1) tensor.
    """
    w_t = weight if isinstance(weight, Tensor) else None
    w = np.asarray(weight.data if w_t is not None else weight, dtype=np.float64)
    if w.ndim == 3:
        if w.shape[2] != 1:
            raise DimensionError(f"weight tensor must be (C_out, C, 1), got {w.shape}")
        w = w[:, :, 0]
    if w.ndim != 2:
        raise DimensionError(f"weight must be a matrix, got shape {w.shape}")
    c_out, c_in = w.shape
    if c_in != x.shape[0]:
        raise DimensionError(f"weight expects {c_in} input channels, x has {x.shape[0]}")

    b_t = bias if isinstance(bias, Tensor) else None
    if bias is None:
        b = np.zeros(c_out)
    else:
        b = np.asarray(bias.data if b_t is not None else bias, dtype=np.float64).reshape(-1)
    if b.shape != (c_out,):
        raise DimensionError(f"bias must have {c_out} entries, got {b.size}")

    out = np.einsum("ok,khw->ohw", w, x.data) + b[:, None, None]

    parents = [x] + [t for t in (w_t, b_t) if t is not None]

    def vjp(g):
        grads = [np.einsum("ok,ohw->khw", w, g)]
        if w_t is not None:
            grads.append(np.einsum("ohw,khw->ok", g, x.data).reshape(w_t.shape))
        if b_t is not None:
            grads.append(g.sum(axis=(1, 2)).reshape(b_t.shape))
        return grads

    return Tensor._from_op(out, "channel_project", parents, vjp)


def _lerp_plan(n_in: int, n_out: int):
    # Corner-aligned sample positions: output i maps to i*(n_in-1)/(n_out-1).
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    if n_in == n_out:
        # exact identity, guards against pos rounding to k - 1e-16
        lo = np.arange(n_out)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = np.zeros(n_out)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return lo, hi, frac, mat


def resize_bilinear(x: Tensor, target: Sequence[int]) -> Tensor:
    """Corner-aligned bilinear resize of every channel to ``target`` (H, W).

    Interpolation is written as ``a + t*(b - a)`` so constant fields and
    same-size resizes come back bit-for-bit.
    """
    H, W = (int(v) for v in target)
    if H < 1 or W < 1:
        raise DimensionError(f"target dimensions must be >= 1, got {(H, W)}")
    _, h, w = x.shape
    ylo, yhi, yf, ry = _lerp_plan(h, H)
    xlo, xhi, xf, rx = _lerp_plan(w, W)

    rows_lo = x.data[:, ylo, :]
    rows = rows_lo + yf[None, :, None] * (x.data[:, yhi, :] - rows_lo)
    cols_lo = rows[:, :, xlo]
    out = cols_lo + xf[None, None, :] * (rows[:, :, xhi] - cols_lo)

    def vjp(g):
        return [np.einsum("Hh,cHW,Ww->chw", ry, g, rx)]

    return Tensor._from_op(out, "resize_bilinear", [x], vjp)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    # name -> (forward, derivative given (input, output))
    "identity": (lambda z: z.copy(), lambda z, y: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, y: (z > 0).astype(np.float64)),
    "sigmoid": (_sigmoid, lambda z, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda z, y: 1.0 - y * y),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z, y: _sigmoid(z)),
}


def pointwise(x: Tensor, act: str) -> Tensor:
    try:
        fwd, deriv = ACTIVATIONS[act]
    except KeyError:
        raise ContractError(f"unknown activation {act!r}; choose from {sorted(ACTIVATIONS)}") from None
    out = fwd(x.data)

    def vjp(g):
        return [g * deriv(x.data, out)]

    return Tensor._from_op(out, act, [x], vjp)


def weighted_sum(coeffs: Sequence, terms: Sequence[Tensor]) -> Tensor:
    """``sum_j coeffs[j] * terms[j]``; coefficients may be Fractions."""
    if len(terms) == 0 or len(coeffs) != len(terms):
        raise DimensionError(f"need len(coeffs) == len(terms) >= 1, got {len(coeffs)} and {len(terms)}")
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise DimensionError(f"weighted_sum: shape mismatch {shape} vs {t.shape}")
    cs = [float(c) for c in coeffs]
    out = cs[0] * terms[0].data
    for c, t in zip(cs[1:], terms[1:]):
        out = out + c * t.data

    def vjp(g):
        return [c * g for c in cs]

    return Tensor._from_op(out, "weighted_sum", list(terms), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, "add", [a, b], lambda g: [g, g])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, "sub", [a, b], lambda g: [g, -g])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor._from_op(a.data * b.data, "mul", [a, b], lambda g: [g * b.data, g * a.data])


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return Tensor._from_op(out, "div", [a, b], lambda g: [g / b.data, -g * out / b.data])


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(c * x.data, "scale", [x], lambda g: [c * g])


def add_scalar(x: Tensor, c: float) -> Tensor:
    return Tensor._from_op(x.data + float(c), "add_scalar", [x], lambda g: [g])


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries as a (1, 1, 1) tensor."""
    shape = x.shape
    return Tensor._from_op(np.full((1, 1, 1), x.data.sum()), "sum", [x],
                           lambda g: [np.full(shape, g.reshape(-1)[0])])


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(tsum(x), 1.0 / n)


# --------------------------------------------------------------- autodiff


class GradTape:
    """Topologically ordered record of a graph and its accumulated gradients."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops
        self._grads: dict[int, np.ndarray] = {}
        self._keep: dict[int, Tensor] = {}

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = np.array(g, dtype=np.float64).reshape(t.shape)
            self._keep[key] = t

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the loss w.r.t. ``t``; zeros if ``t`` was not reached."""
        g = self._grads.get(id(t))
        if g is None or self._keep.get(id(t)) is not t:
            return np.zeros(t.shape)
        return g

    def leaves(self) -> list[Tensor]:
        return [t for t in self.ops if t.is_leaf and t.requires_grad]


def _toposort(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor) -> GradTape:
    """Reverse-mode sweep from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradTape(_toposort(loss) if loss.requires_grad else [])
    if not loss.requires_grad:
        return tape
    tape._accumulate(loss, np.ones(loss.shape))
    for node in reversed(tape.ops):
        if node._vjp is None:
            continue
        g = tape._grads.get(id(node))
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if parent.requires_grad:
                tape._accumulate(parent, pg)
    return tape


def finite_diff_grad(fn: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one entry at a time."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr):
        out = fn(Tensor(arr))
        return out.item() if isinstance(out, Tensor) else float(out)

    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = value(base)
        flat[k] = orig - eps
        down = value(base)
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * eps)
    return grad


# ------------------------------------------------------------------ FTNSR

_MAGIC = b"FTNSR v1\n"


def save_tensor(path: str | Path, t: Tensor) -> None:
    c, h, w = t.shape
    header = _MAGIC + f"dtype=f64 shape={c},{h},{w}\n".encode("ascii")
    Path(path).write_bytes(header + t.data.astype("<f8").tobytes(order="C"))


def load_tensor(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ContractError(f"{path}: not an FTNSR v1 file")
    rest = raw[len(_MAGIC):]
    nl = rest.index(b"\n")
    meta = rest[:nl].decode("ascii").split()
    fields = dict(item.split("=", 1) for item in meta)
    if fields.get("dtype") != "f64":
        raise ContractError(f"{path}: unsupported dtype {fields.get('dtype')!r}")
    shape = tuple(int(v) for v in fields["shape"].split(","))
    if len(shape) != 3:
        raise DimensionError(f"{path}: FTNSR tensors are rank 3, got shape {shape}")
    body = rest[nl + 1:]
    if len(body) != 8 * math.prod(shape):
        raise DimensionError(f"{path}: payload has {len(body)} bytes, expected {8 * math.prod(shape)}")
    return Tensor(np.frombuffer(body, dtype="<f8").reshape(shape))

