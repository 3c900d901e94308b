"""Minimal reverse-mode differentiation over numpy arrays.

The op set is deliberately closed: matmul, relu, clip01, min_rows,
elementwise add/sub/mul, scalar scale, square, maximum, abs, sum/mean
reductions, plus reshape as a zero-cost structural op. That is exactly
what the fixed CSG assembly graph needs; anything fancier is out of
contract.

Subgradient conventions (deterministic, tested):
  relu'(0) = 0, clip01' at 0 or 1 = 0, abs'(0) = 0,
  row-min ties route the gradient to the lowest column index,
  elementwise-max ties route to the first argument.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

_FLOAT_KINDS = ("f",)

# NaN trapping for debug runs: every forward op asserts finite outputs.
_debug_nan = bool(int(os.environ.get("D2CSG_DEBUG_NAN", "0")))


def set_debug_nan(enabled: bool) -> None:
    """Toggle NaN/Inf trapping on all forward ops."""
    global _debug_nan
    _debug_nan = bool(enabled)


class Tensor:
    """A dense array plus an accumulated gradient slot.

    Values may be float32 or float64; gradients match the value dtype.
    Tensors are treated as immutable while recorded on a tape; the
    optimizer mutates `values` in place only between recordings.
    """

    __slots__ = ("values", "grad", "requires_grad", "tape")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype.kind not in _FLOAT_KINDS:
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype})"

    # operator sugar; every operator maps onto a kernel below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of one forward pass; supports a single backward."""

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)
        self.consumed = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def _record(self, out: Tensor, backward_fn) -> None:
        out.tape = self
        self._records.append((out, backward_fn))


_tape_stack: list[Tape] = []


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _debug_nan and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


def _make(values: np.ndarray, backward_fn, op: str) -> Tensor:
    _check_finite(values, op)
    out = Tensor(values)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.values.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; backward dA = dC @ B^T, dB = A^T @ dC."""
    if a.values.shape[-1] != b.values.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.values.shape} x {b.values.shape}")

    def backward(out):
        _accum(a, out.grad @ b.values.T)
        _accum(b, a.values.T @ out.grad)

    return _make(a.values @ b.values, backward, "matmul")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); zero subgradient at 0."""
    mask = x.values > 0

    def backward(out):
        _accum(x, out.grad * mask)

    return _make(np.where(mask, x.values, 0.0), backward, "relu")


def clip01(x: Tensor) -> Tensor:
    """Clip to [0, 1]; gradient 1 strictly inside, 0 at and beyond the rails."""
    mask = (x.values > 0) & (x.values < 1)

    def backward(out):
        _accum(x, out.grad * mask)

    return _make(np.clip(x.values, 0.0, 1.0), backward, "clip01")


def min_rows(x: Tensor) -> Tensor:
    """Per-row minimum of an n x c matrix, returned as n x 1.

    The row gradient goes entirely to the first column attaining the
    minimum (lowest index on ties).
    """
    if x.values.ndim != 2 or x.values.shape[1] < 1:
        raise ValueError(f"min_rows expects a non-empty n x c matrix, got {x.values.shape}")
    idx = np.argmin(x.values, axis=1)
    vals = x.values[np.arange(x.values.shape[0]), idx][:, None]

    def backward(out):
        g = np.zeros_like(x.values)
        g[np.arange(x.values.shape[0]), idx] = out.grad[:, 0]
        _accum(x, g)

    return _make(vals, backward, "min_rows")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    vals = a.values + b.values

    def backward(out):
        _accum(a, _unbroadcast(out.grad, a.values.shape))
        _accum(b, _unbroadcast(out.grad, b.values.shape))

    return _make(vals, backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    vals = a.values - b.values

    def backward(out):
        _accum(a, _unbroadcast(out.grad, a.values.shape))
        _accum(b, _unbroadcast(-out.grad, b.values.shape))

    return _make(vals, backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    vals = a.values * b.values

    def backward(out):
        _accum(a, _unbroadcast(out.grad * b.values, a.values.shape))
        _accum(b, _unbroadcast(out.grad * a.values, b.values.shape))

    return _make(vals, backward, "mul")


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)

    def backward(out):
        _accum(x, out.grad * k)

    return _make(x.values * k, backward, "scale")


def square(x: Tensor) -> Tensor:
    def backward(out):
        _accum(x, out.grad * 2.0 * x.values)

    return _make(x.values * x.values, backward, "square")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.values >= b.values

    def backward(out):
        _accum(a, _unbroadcast(out.grad * take_a, a.values.shape))
        _accum(b, _unbroadcast(out.grad * ~take_a, b.values.shape))

    return _make(np.where(take_a, a.values, b.values), backward, "maximum")


def abs_(x: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at 0."""
    s = np.sign(x.values)

    def backward(out):
        _accum(x, out.grad * s)

    return _make(np.abs(x.values), backward, "abs")


def sum_(x: Tensor) -> Tensor:
    def backward(out):
        _accum(x, np.full_like(x.values, out.grad.reshape(())))

    return _make(np.asarray(x.values.sum()), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.values.size

    def backward(out):
        _accum(x, np.full_like(x.values, out.grad.reshape(()) / n))

    return _make(np.asarray(x.values.mean()), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(out):
        _accum(x, out.grad.reshape(x.values.shape))

    return _make(x.values.reshape(shape), backward, "reshape")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """Composition helper: relu(x) - slope * relu(-x)."""
    return sub(relu(x), scale(relu(scale(x, -1.0)), slope))


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into every reachable Tensor's `.grad`.

    The tape is consumed; a second backward on the same recording raises.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not produced by this tape's forward pass")
    if tape.consumed:
        raise RuntimeError("backward already ran on this tape")
    if loss.values.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.values.shape}")
    tape.consumed = True
    loss.grad = np.ones_like(loss.values)
    for out, backward_fn in reversed(tape._records):
        if out.grad is not None:
            backward_fn(out)


# ---------------------------------------------------------------------------
# finite-difference verification harness


@dataclass
class FdBlockReport:
    name: str
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0
    n_checked: int = 0
    n_skipped: int = 0


@dataclass
class FdReport:
    tol: float
    blocks: list[FdBlockReport] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((b.max_rel_err for b in self.blocks), default=0.0)

    @property
    def max_abs_err(self) -> float:
        return max((b.max_abs_err for b in self.blocks), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self):
        lines = [
            f"  {b.name}: abs={b.max_abs_err:.3e} rel={b.max_rel_err:.3e} "
            f"checked={b.n_checked} skipped={b.n_skipped}"
            for b in self.blocks
        ]
        head = f"finite-difference report (tol {self.tol:g}, {'ok' if self.ok else 'FAIL'})\n"
        return head + "\n".join(lines)


def finite_difference_check(
    f, params, eps: float = 1e-5, tol: float = 1e-4, probe=None, probe_eps=None, names=None
) -> FdReport:
    """Compare analytic gradients of `f` against central differences.

    Args:
        f: callable taking a list of leaf Tensors, returning a scalar Tensor
            built from this module's ops.
        params: list of numpy arrays, the leaf values (checked at f64).
        eps: central-difference step.
        tol: relative-error threshold recorded on the report.
        probe: optional callable over the raw value list returning a hashable
            kink signature (relu masks, argmin indices, ...). A parameter whose
            signature changes within +-probe_eps sits on a non-smooth boundary
            and is skipped rather than compared.
        probe_eps: half-width of the kink exclusion zone (defaults to eps).

    Relative error convention: |fd - analytic| / max(|fd| + |analytic|, 1e-6).
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    if probe_eps is None:
        probe_eps = eps
    leaves = [Tensor(p.copy(), requires_grad=True) for p in params]
    tape = Tape()
    with tape:
        loss = f(leaves)
    backward(tape, loss)
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)
        for leaf in leaves
    ]

    def eval_at(values):
        out = f([Tensor(v) for v in values])
        return out.item()

    report = FdReport(tol=tol)
    work = [p.copy() for p in params]
    for bi, block in enumerate(work):
        name = names[bi] if names else f"block{bi}"
        rep = FdBlockReport(name=name)
        flat = block.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            if probe is not None:
                flat[i] = orig + probe_eps
                sig_plus = probe(work)
                flat[i] = orig - probe_eps
                sig_minus = probe(work)
                if sig_plus != sig_minus:
                    flat[i] = orig
                    rep.n_skipped += 1
                    continue
            flat[i] = orig + eps
            f_plus = eval_at(work)
            flat[i] = orig - eps
            f_minus = eval_at(work)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = float(analytic[bi].reshape(-1)[i])
            abs_err = abs(fd - an)
            rel_err = abs_err / max(abs(fd) + abs(an), 1e-6)
            rep.max_abs_err = max(rep.max_abs_err, abs_err)
            rep.max_rel_err = max(rep.max_rel_err, rel_err)
            rep.n_checked += 1
        report.blocks.append(rep)
    return report
