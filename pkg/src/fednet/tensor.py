"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Two precisions are supported: float32 for training and float64 for
verification (finite-difference gradient checks are meaningless at float32).
All tensors participating in one graph must share a dtype; ops raise on a mix.

Differentiable ops record onto a ``Tape`` (an execution-ordered list of
operations) when one is active.  With no tape active, the same calls are plain
forward evaluation with no recording overhead.  Gradients accumulate by
summation over all paths from the root; leaf tensors keep their accumulated
gradient in ``Tensor.grad``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)

# When True, every op asserts its output is finite (debugging aid; slow).
FINITE_CHECKS = False


class Tensor:
    """N-dimensional array with optional participation in gradient recording.

    ``data`` is row-major with the last axis fastest; images use [N, C, H, W]
    axis order.  Tensors are treated as immutable once produced by an op.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            if np.issubdtype(arr.dtype, np.number) or arr.dtype == np.bool_:
                arr = arr.astype(np.float64)
            else:
                raise TypeError(f"unsupported tensor dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic (same-shape tensor or python scalar operands only) --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def log(self) -> "Tensor":
        return log(self)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        return clamp(self, lo, hi)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class TapeEntry:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of differentiable ops.

    Entries are appended in forward-execution order, which is a topological
    order of the graph.  A tape supports a single backward pass.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, root: Tensor) -> None:
        backward(root, self)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Finish an op: propagate requires_grad and record onto the active tape.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, in order.  Returned arrays may be views; the backward pass copies
    before accumulating.
    """
    out.requires_grad = any(t.requires_grad for t in inputs)
    if FINITE_CHECKS:
        assert np.all(np.isfinite(out.data)), "non-finite value produced by forward op"
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.entries.append(TapeEntry(out, inputs, backward_fn))
    return out


def backward(root: Tensor, tape: Tape) -> None:
    """Reverse-mode pass: fills ``grad`` on every leaf reachable from ``root``.

    ``root`` must be a scalar produced through ``tape``.  Gradients sum over
    all paths.  A tape can be walked once.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {tuple(root.shape)}")
    if tape._consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    produced = {id(e.out) for e in tape.entries}
    if id(root) not in produced:
        raise ValueError("root was not produced on this tape (detached root)")
    tape._consumed = True

    # id -> [tensor, accumulated gradient]; the buffer is always owned here.
    pending: dict[int, list] = {id(root): [root, np.ones_like(root.data)]}
    for entry in reversed(tape.entries):
        slot = pending.pop(id(entry.out), None)
        if slot is None:
            continue
        grads_in = entry.backward_fn(slot[1])
        if len(grads_in) != len(entry.inputs):
            raise RuntimeError("backward_fn returned wrong number of gradients")
        for t, g in zip(entry.inputs, grads_in):
            if g is None or not t.requires_grad:
                continue
            acc = pending.get(id(t))
            if acc is None:
                pending[id(t)] = [t, np.array(g, dtype=t.data.dtype)]
            else:
                acc[1] += g
    # Whatever is left was never an op output on this tape: the leaves.
    for t, g in pending.values():
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# ---------------------------------------------------------------------------


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed precision {a.data.dtype} vs {b.data.dtype}")
    if a.shape != b.shape:
        for axis, (ea, eb) in enumerate(zip(a.shape, b.shape)):
            if ea != eb:
                raise ValueError(f"{op}: shape mismatch at axis {axis}: {ea} vs {eb}")
        raise ValueError(f"{op}: rank mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_binary(a, b, "add")
        out = Tensor(a.data + b.data)
        return record(out, (a, b), lambda g: (g, g))
    c = float(b)
    out = Tensor(a.data + c)
    return record(out, (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_binary(a, b, "sub")
        out = Tensor(a.data - b.data)
        return record(out, (a, b), lambda g: (g, -g))
    c = float(b)
    out = Tensor(a.data - c)
    return record(out, (a,), lambda g: (g,))


def rsub(a: Tensor, scalar) -> Tensor:
    c = float(scalar)
    out = Tensor(c - a.data)
    return record(out, (a,), lambda g: (-g,))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return record(out, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_binary(a, b, "mul")
        out = Tensor(a.data * b.data)
        return record(out, (a, b), lambda g: (g * b.data, g * a.data))
    c = float(b)
    out = Tensor(a.data * c)
    return record(out, (a,), lambda g: (g * c,))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_binary(a, b, "div")
        out = Tensor(a.data / b.data)

        def backward_fn(g):
            return g / b.data, -g * a.data / (b.data * b.data)

        return record(out, (a, b), backward_fn)
    c = float(b)
    out = Tensor(a.data / c)
    return record(out, (a,), lambda g: (g / c,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return record(out, (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ValueError(f"clamp: lo {lo} must be < hi {hi}")
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return record(out, (a,), lambda g: (g * mask,))


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        out = Tensor(a.data.sum(dtype=a.data.dtype))
        shape = a.shape
        return record(out, (a,), lambda g: (np.broadcast_to(g, shape),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = Tensor(a.data.sum(axis=axes, dtype=a.data.dtype))
    shape = a.shape

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape),)

    return record(out, (a,), backward_fn)


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean(dtype=a.data.dtype))
    shape = a.shape
    return record(out, (a,), lambda g: (np.broadcast_to(g / n, shape),))


# ---------------------------------------------------------------------------
# Parameters and SGD
# ---------------------------------------------------------------------------


class Parameter:
    """Trainable value plus its gradient and SGD momentum buffer."""

    __slots__ = ("name", "value", "momentum")

    def __init__(self, array: np.ndarray, name: str = ""):
        self.name = name
        self.value = Tensor(array, requires_grad=True)
        self.momentum = np.zeros_like(self.value.data)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={tuple(self.value.shape)})"


def clip_gradients(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``;
    returns the pre-clip norm.  A non-positive ``max_norm`` disables clipping."""
    params = list(params)
    total = 0.0
    for p in params:
        g = p.value.grad
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    total = total ** 0.5
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.value.grad is not None:
                p.value.grad *= p.value.grad.dtype.type(scale)
    return total


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4) -> None:
    """One SGD-with-momentum update, then gradients are zeroed.

    buf <- momentum * buf + (grad + weight_decay * value)
    value <- value - lr * buf
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    for p in params:
        g = p.value.grad
        if g is None:
            raise RuntimeError(f"parameter {p.name!r} has no gradient; run backward first")
        p.momentum *= momentum
        p.momentum += g + weight_decay * p.value.data
        p.value.data -= lr * p.momentum
        p.value.grad = None


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

# When set to a list, ops with non-smooth points (relu) append the byte
# signature of their active set here on every forward call.  grad_check uses
# this to detect finite-difference windows that straddle a kink, where the
# central-difference quotient converges to the average of the two one-sided
# slopes instead of the derivative and is therefore not a valid estimate.
_KINK_LOG: Optional[list] = None


def log_kink_pattern(mask: np.ndarray) -> None:
    if _KINK_LOG is not None:
        _KINK_LOG.append(mask.tobytes())


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_coord: Optional[tuple] = None
    message: str = ""
    kink_coords_skipped: int = 0

    def __str__(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        extra = f" ({self.message})" if self.message else ""
        if self.kink_coords_skipped:
            extra += f" [{self.kink_coords_skipped} kink-straddling coords excluded]"
        return f"{state} max_rel_err={self.max_rel_err:.3e}{extra}"


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, tol: float = 1e-4,
               weight_seed: int = 2024) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps a float64 tensor to a tensor of any shape; internally the
    output is reduced by a fixed random linear functional so permutation and
    scaling errors cannot cancel.  Per coordinate i the step is
    h = 1e-5 * max(1, |x_i|) and the error metric is
    |a - n| / max(1e-8, |a| + |n|), reported as its maximum.

    The weights are scaled so the reduced value is O(1e-2): finite differences
    of a large sum drown small-gradient coordinates in floating-point
    roundoff, while after scaling those coordinates fall under the 1e-8
    denominator floor where the roundoff noise sits far below tolerance.

    Coordinates whose +h/-h evaluations disagree on some relu active set are
    excluded from the comparison (and counted in the report): across a kink
    the difference quotient measures a slope average, not the derivative.
    The check fails if every coordinate is excluded.
    """
    global _KINK_LOG
    if x.data.dtype != np.float64:
        raise ValueError("grad_check requires float64 tensors (verification precision)")
    x.requires_grad = True
    x.grad = None

    probe = f(x)
    rng = np.random.default_rng(weight_seed)
    weights = rng.uniform(0.5, 1.5, size=probe.data.shape)
    weights /= 100.0 * probe.data.size

    with Tape() as tape:
        y = f(x)
        s = (y * Tensor(weights)).sum()
    backward(s, tape)
    if x.grad is None:
        return GradCheckReport(np.inf, False, None, "no gradient reached the input")
    analytic = x.grad.copy()

    def weighted_eval() -> tuple[float, bytes]:
        global _KINK_LOG
        _KINK_LOG = []
        try:
            value = float(np.sum(f(x).data * weights))
            signature = b"".join(_KINK_LOG)
        finally:
            _KINK_LOG = None
        return value, signature

    numeric = np.empty_like(x.data)
    valid = np.ones(x.data.size, dtype=bool)
    flat_x = x.data.reshape(-1)
    flat_n = numeric.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        h = 1e-5 * max(1.0, abs(orig))
        flat_x[i] = orig + h
        up, sig_up = weighted_eval()
        flat_x[i] = orig - h
        down, sig_down = weighted_eval()
        flat_x[i] = orig
        flat_n[i] = (up - down) / (2.0 * h)
        if sig_up != sig_down:
            valid[i] = False

    skipped = int((~valid).sum())
    if not valid.any():
        return GradCheckReport(np.inf, False, None,
                               "every coordinate straddles a kink", skipped)
    a_flat = analytic.reshape(-1)[valid]
    n_flat = flat_n[valid]
    finite = np.isfinite(a_flat) & np.isfinite(n_flat)
    if not finite.all():
        bad_flat = int(np.flatnonzero(valid)[int(np.argmin(finite))])
        coord = tuple(int(v) for v in np.unravel_index(bad_flat, x.data.shape))
        return GradCheckReport(np.inf, False, coord,
                               f"non-finite gradient at {coord}", skipped)

    rel = np.abs(a_flat - n_flat) / np.maximum(1e-8, np.abs(a_flat) + np.abs(n_flat))
    worst_valid = int(np.argmax(rel))
    worst_flat = int(np.flatnonzero(valid)[worst_valid])
    worst = tuple(int(v) for v in np.unravel_index(worst_flat, x.data.shape))
    max_rel = float(rel.max())
    return GradCheckReport(max_rel, max_rel <= tol, worst, "", skipped)
