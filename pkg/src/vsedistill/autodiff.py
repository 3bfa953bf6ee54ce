"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every value is a float64 ``Tensor``. Operations record their inputs and a
backward closure when any input requires a gradient; ``backward`` walks the
recorded graph once in reverse topological order and accumulates gradients
additively into ``.grad``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "forward_op",
    "backward",
    "matmul",
    "add",
    "sub",
    "scalar_mul",
    "hadamard",
    "div",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "relu",
    "mean_over_axis",
    "concat_along_axis",
    "l2_norm",
    "normalize",
    "dot",
    "sum",
    "reshape",
    "transpose",
    "CheckReport",
    "grad_check",
    "grad_check_params",
    "directional_check",
]

LAYER_NORM_EPS = 1e-5

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, teacher passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


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


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), bw, "scalar_mul")


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("hadamard", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "hadamard")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError(f"div: zero in denominator of shape {b.shape}")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def relu(a) -> Tensor:
    """Hinge ``[x]_+``; the subgradient at exactly 0 is 0."""
    a = _as_tensor(a)
    mask = a.data > 0.0

    def bw(g):
        return (g * mask,)

    # np.maximum keeps NaN visible instead of clamping it to 0
    return _make(np.maximum(a.data, 0.0), (a,), bw, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def _gelu_grad(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = _as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * (x * x * x)))

    def bw(g):
        return (g * _gelu_grad(x, t),)

    return _make(0.5 * x * (1.0 + t), (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# contractions and reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.ndim == 1 or b.ndim == 1:
        a2 = reshape(a, (1, a.shape[0])) if a.ndim == 1 else a
        b2 = reshape(b, (b.shape[0], 1)) if b.ndim == 1 else b
        out = matmul(a2, b2)
        shape = out.shape
        if a.ndim == 1:
            shape = shape[:-2] + shape[-1:]
        if b.ndim == 1:
            shape = shape[:-1]
        return reshape(out, shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean_over_axis(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def dot(a, b) -> Tensor:
    """Inner product along the last axis (batched)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"dot: last dimensions differ, shapes {a.shape} and {b.shape}")
    return sum(hadamard(a, b), axis=-1)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0.0, n, 1.0)
        return (np.where(n > 0.0, g * a.data / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out, (a,), bw, "l2_norm")


def normalize(a, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit length; zero vectors are a domain error."""
    a = _as_tensor(a)
    n = l2_norm(a, axis=axis, keepdims=True)
    if np.any(n.data == 0.0):
        bad = np.argwhere(np.squeeze(n.data, axis=axis) == 0.0)
        raise DomainError(f"normalize: zero vector at index {tuple(int(i) for i in bad[0])}")
    return div(a, n)


def softmax_lastdim(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), bw, "softmax_lastdim")


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine terms)."""
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError(f"layer_norm: needs a last dimension of extent >= 1, got shape {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), bw, "layer_norm")


# ---------------------------------------------------------------------------
# structural


def concat_along_axis(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_along_axis: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat_along_axis: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat_along_axis")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def index(a, key) -> Tensor:
    """Basic or fancy indexing; gradients scatter-add back (repeated indices accumulate)."""
    a = _as_tensor(a)
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw, "index")


_FORWARD_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "scalar_mul": scalar_mul,
    "hadamard": hadamard,
    "softmax_lastdim": softmax_lastdim,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "mean_over_axis": mean_over_axis,
    "concat_along_axis": lambda *ts, axis=0: concat_along_axis(ts, axis=axis),
    "l2_norm": l2_norm,
    "dot": dot,
    "sum": sum,
    "relu": relu,
    "div": div,
    "normalize": normalize,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = _FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; expected one of {sorted(_FORWARD_OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from a scalar root.

    Repeated calls without ``zero_grad`` accumulate into existing gradients.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        if node.grad is not None:
            node.grad = node.grad + g
        else:
            # interior grads may alias each other; only leaves get a private copy
            node.grad = g.copy() if node._backward is None else g


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class CheckReport:
    passed: bool
    max_rel_err: float
    n_checked: int
    n_skipped: int
    failures: list[tuple] = field(default_factory=list)
    label: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.label}: max rel err {self.max_rel_err:.3e} over "
                f"{self.n_checked} coords ({self.n_skipped} skipped)")


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n))


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-9,
    coords: Iterable[tuple[int, ...]] | None = None,
    label: str = "",
) -> CheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``point`` with central differences.

    Coordinates where both gradients are below ``abs_floor`` are skipped.
    """
    base = np.array(_as_tensor(point).data, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    if y.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {y.shape}")
    backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    if coords is None:
        coords = list(np.ndindex(*base.shape)) if base.ndim else [()]
    max_err, n_checked, n_skipped, failures = 0.0, 0, 0, []
    with no_grad():
        for c in coords:
            xp = base.copy()
            xp[c] += h
            xm = base.copy()
            xm[c] -= h
            num = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * h)
            ana = float(analytic[c])
            if abs(ana) < abs_floor and abs(num) < abs_floor:
                n_skipped += 1
                continue
            err = _rel_err(ana, num)
            n_checked += 1
            max_err = max(max_err, err)
            if err > rel_tol:
                failures.append((c, ana, num, err))
    return CheckReport(not failures, max_err, n_checked, n_skipped, failures, label)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    rng: np.random.Generator,
    coords_per_param: int = 2,
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-9,
    label: str = "",
) -> CheckReport:
    """Central-difference check of sampled coordinates of every tensor in ``params``.

    ``loss_fn`` rebuilds its graph from the current parameter values on every
    call; parameter data is perturbed in place and restored.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    max_err, n_checked, n_skipped, failures = 0.0, 0, 0, []
    with no_grad():
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
            for idx in flat:
                c = np.unravel_index(int(idx), p.shape)
                orig = p.data[c]
                p.data[c] = orig + h
                fp = loss_fn().item()
                p.data[c] = orig - h
                fm = loss_fn().item()
                p.data[c] = orig
                num = (fp - fm) / (2.0 * h)
                ana = float(analytic[c])
                if abs(ana) < abs_floor and abs(num) < abs_floor:
                    n_skipped += 1
                    continue
                err = _rel_err(ana, num)
                n_checked += 1
                max_err = max(max_err, err)
                if err > rel_tol:
                    failures.append((name, c, ana, num, err))
    return CheckReport(not failures, max_err, n_checked, n_skipped, failures, label)


def directional_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    rng: np.random.Generator,
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-9,
    label: str = "",
) -> CheckReport:
    """Compare grad . u with the central difference along one random unit direction u."""
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    dirs = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    scale = np.sqrt(np.sum([float((u * u).sum()) for u in dirs.values()]))
    ana = 0.0
    for k, p in params.items():
        dirs[k] /= scale
        if p.grad is not None:
            ana += float((p.grad * dirs[k]).sum())
    originals = {k: p.data.copy() for k, p in params.items()}
    with no_grad():
        for k, p in params.items():
            p.data = originals[k] + h * dirs[k]
        fp = loss_fn().item()
        for k, p in params.items():
            p.data = originals[k] - h * dirs[k]
        fm = loss_fn().item()
        for k, p in params.items():
            p.data = originals[k]
    num = (fp - fm) / (2.0 * h)
    if abs(ana) < abs_floor and abs(num) < abs_floor:
        return CheckReport(True, 0.0, 0, 1, [], label)
    err = _rel_err(ana, num)
    fails = [("direction", ana, num, err)] if err > rel_tol else []
    return CheckReport(not fails, err, 1, 0, fails, label)
