"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable computation goes through :func:`apply_primitive`, which
evaluates one primitive on numpy arrays and, when any input requires a
gradient, appends a node to the calling thread's tape. :func:`backward`
walks that tape once in reverse recording order and then resets it.

Broadcasting is limited to leading-batch expansion: for the elementwise
binary primitives one operand's shape must equal the other's shape or be a
trailing suffix of it (e.g. a ``[C]`` bias added to ``[N, C]``). Anything else
is a :class:`ShapeError`.

Gradient policy: leaf tensors *accumulate* into ``.grad`` across calls to
:func:`backward`; call :func:`zero_grad` between optimisation steps.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "AutodiffError",
    "ShapeError",
    "UnknownPrimitiveError",
    "BackwardError",
    "Tensor",
    "Tape",
    "apply_primitive",
    "backward",
    "grad_check",
    "no_grad",
    "zero_grad",
    "current_tape",
    "PRIMITIVES",
]


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError, ValueError):
    pass


class UnknownPrimitiveError(AutodiffError, KeyError):
    pass


class BackwardError(AutodiffError, RuntimeError):
    pass


_ids = itertools.count(1)
_local = threading.local()


def _next_id() -> int:
    return next(_ids)


@dataclass
class Node:
    node_id: int
    kind: str
    inputs: tuple
    attrs: dict
    saved: Any
    out_data: np.ndarray


class Tape:
    """Ordered record of primitive applications for one thread."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._outputs.add(node.node_id)

    def __contains__(self, node_id) -> bool:
        return node_id in self._outputs

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self._outputs = set()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Evaluate primitives without recording anything on the tape."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """An N-d float64 array that can participate in the tape.

    ``node_id`` is assigned to leaves that require a gradient at construction
    and to every recorded primitive output.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = _next_id() if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data if data.dtype == np.float64 else data.astype(np.float64)
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # arithmetic sugar; every path goes through apply_primitive
    def __add__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("add", [self, other])
        return apply_primitive("shift", [self], {"value": float(other)})

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("sub", [self, other])
        return apply_primitive("shift", [self], {"value": -float(other)})

    def __rsub__(self, other):
        return apply_primitive("shift", [-self], {"value": float(other)})

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("multiply", [self, other])
        return apply_primitive("scale", [self], {"factor": float(other)})

    __rmul__ = __mul__

    def __neg__(self):
        return apply_primitive("scale", [self], {"factor": -1.0})

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * apply_primitive("power", [other], {"exponent": -1.0})
        return apply_primitive("scale", [self], {"factor": 1.0 / float(other)})

    def __pow__(self, exponent):
        return apply_primitive("power", [self], {"exponent": float(exponent)})

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __getitem__(self, key):
        return apply_primitive("slice", [self], {"key": key})

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], {"shape": tuple(shape)})

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        if not perm:
            perm = tuple(reversed(range(self.ndim)))
        return apply_primitive("transpose", [self], {"perm": tuple(perm)})

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("reduce_sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("reduce_mean", [self], {"axis": axis, "keepdims": keepdims})

    def sigmoid(self):
        return apply_primitive("sigmoid", [self])

    def relu(self):
        return apply_primitive("relu", [self])

    def exp(self):
        return apply_primitive("exp", [self])

    def log(self):
        return apply_primitive("log", [self])

    def abs(self):
        return apply_primitive("abs", [self])


# ---------------------------------------------------------------------------
# primitive table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    n_inputs: int | None
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, n_inputs=1):
    def deco(cls):
        PRIMITIVES[name] = Primitive(n_inputs, cls.forward, cls.backward)
        return cls

    return deco


def _shape_error(kind, msg, *shapes):
    dims = ", ".join(str(list(s)) for s in shapes)
    return ShapeError(f"{kind}: {msg} (got {dims})")


def _check_suffix(kind, a_shape, b_shape):
    if a_shape == b_shape:
        return
    short, long_ = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(short) < len(long_) and tuple(long_[len(long_) - len(short):]) == tuple(short):
        return
    raise _shape_error(kind, "operands must match or one must be a trailing suffix of the other",
                       a_shape, b_shape)


def _unexpand(grad, shape):
    """Sum a leading-batch-expanded gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


@_register("add", 2)
class _Add:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _check_suffix("add", a.shape, b.shape)
        return a + b, None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return _unexpand(g, xs[0].shape), _unexpand(g, xs[1].shape)


@_register("sub", 2)
class _Sub:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _check_suffix("sub", a.shape, b.shape)
        return a - b, None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return _unexpand(g, xs[0].shape), -_unexpand(g, xs[1].shape)


@_register("multiply", 2)
class _Mul:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _check_suffix("multiply", a.shape, b.shape)
        return a * b, None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        a, b = xs
        return _unexpand(g * b, a.shape), _unexpand(g * a, b.shape)


@_register("scale")
class _Scale:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] * attrs["factor"], None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (g * attrs["factor"],)


@_register("shift")
class _Shift:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] + attrs["value"], None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (g,)


@_register("matmul", 2)
class _Matmul:
    """``[..., m, k] @ [k, n]`` or ``[..., m, k] @ [..., k, n]`` with equal batch dims."""

    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.ndim < 2 or b.ndim < 2:
            raise _shape_error("matmul", "operands must have rank >= 2", a.shape, b.shape)
        if a.shape[-1] != b.shape[-2]:
            raise _shape_error("matmul", f"inner dims differ ({a.shape[-1]} vs {b.shape[-2]})",
                               a.shape, b.shape)
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise _shape_error("matmul", "batch dims differ", a.shape, b.shape)
        if b.ndim == 2:
            # one GEMM instead of one small product per leading index
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],)), None
        return a @ b, None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        a, b = xs
        if b.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.T).reshape(a.shape)
            gb = a.reshape(-1, a.shape[-1]).T @ g2
        else:
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
        return ga, gb


@_register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(xs, attrs):
        return expit(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (g * out * (1.0 - out),)


@_register("relu")
class _Relu:
    @staticmethod
    def forward(xs, attrs):
        return np.maximum(xs[0], 0.0), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        # subgradient at exactly 0 is 0
        return (g * (xs[0] > 0.0),)


@_register("softplus")
class _Softplus:
    @staticmethod
    def forward(xs, attrs):
        return np.logaddexp(0.0, xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (g * expit(xs[0]),)


@_register("exp")
class _Exp:
    @staticmethod
    def forward(xs, attrs):
        return np.exp(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (g * out,)


@_register("log")
class _Log:
    @staticmethod
    def forward(xs, attrs):
        return np.log(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (g / xs[0],)


@_register("power")
class _Power:
    @staticmethod
    def forward(xs, attrs):
        return np.power(xs[0], attrs["exponent"]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        p = attrs["exponent"]
        if p == 0.0:
            return (np.zeros_like(g),)
        return (g * p * np.power(xs[0], p - 1.0),)


@_register("abs")
class _Abs:
    @staticmethod
    def forward(xs, attrs):
        return np.abs(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (g * np.sign(xs[0]),)


@_register("sin")
class _Sin:
    @staticmethod
    def forward(xs, attrs):
        return np.sin(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (g * np.cos(xs[0]),)


@_register("cos")
class _Cos:
    @staticmethod
    def forward(xs, attrs):
        return np.cos(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (-g * np.sin(xs[0]),)


@_register("clip")
class _Clip:
    @staticmethod
    def forward(xs, attrs):
        return np.clip(xs[0], attrs["lo"], attrs["hi"]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        x = xs[0]
        return (g * ((x >= attrs["lo"]) & (x <= attrs["hi"])),)


def _check_axis(kind, axis, ndim):
    if not -ndim <= axis < ndim:
        raise _shape_error(kind, f"axis {axis} out of range for rank {ndim}")


@_register("softmax")
class _Softmax:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        axis = attrs.get("axis", -1)
        _check_axis("softmax", axis, x.ndim)
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        axis = attrs.get("axis", -1)
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


@_register("layer_norm")
class _LayerNorm:
    """Normalise over the last axis; affine terms are separate primitives."""

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        eps = attrs.get("eps", 1e-5)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        return xhat, inv

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        inv = saved
        n = out.shape[-1]
        gsum = g.sum(axis=-1, keepdims=True)
        gx = (g * out).sum(axis=-1, keepdims=True)
        return ((inv / n) * (n * g - gsum - out * gx),)


@_register("concat", None)
class _Concat:
    @staticmethod
    def forward(xs, attrs):
        axis = attrs.get("axis", 0)
        ref = xs[0]
        _check_axis("concat", axis, ref.ndim)
        ax = axis % ref.ndim
        for x in xs[1:]:
            if x.ndim != ref.ndim or any(
                x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
            ):
                raise _shape_error("concat", f"non-concat dims differ on axis {axis}",
                                   ref.shape, x.shape)
        sizes = [x.shape[ax] for x in xs]
        return np.concatenate(xs, axis=ax), (ax, np.cumsum(sizes)[:-1])

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        ax, splits = saved
        return tuple(np.split(g, splits, axis=ax))


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        try:
            return x.reshape(attrs["shape"]), None
        except ValueError:
            raise _shape_error("reshape", f"cannot reshape to {list(attrs['shape'])}", x.shape)

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (g.reshape(xs[0].shape),)


@_register("transpose")
class _Transpose:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        perm = tuple(attrs["perm"])
        if sorted(perm) != list(range(x.ndim)):
            raise _shape_error("transpose", f"bad permutation {perm}", x.shape)
        return np.transpose(x, perm), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        return (np.transpose(g, np.argsort(attrs["perm"])),)


@_register("slice")
class _Slice:
    """Basic or integer-array indexing; gradient scatters back with ``np.add.at``."""

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        try:
            return np.array(x[attrs["key"]], dtype=np.float64), None
        except IndexError as exc:
            raise _shape_error("slice", str(exc), x.shape)

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        gx = np.zeros_like(xs[0])
        key = attrs["key"]
        parts = key if isinstance(key, tuple) else (key,)
        if any(isinstance(k, (np.ndarray, list)) for k in parts):
            np.add.at(gx, key, g)
        else:
            gx[key] = g
        return (gx,)


@_register("reduce_sum")
class _ReduceSum:
    @staticmethod
    def forward(xs, attrs):
        return np.asarray(xs[0].sum(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        x = xs[0]
        axis = attrs.get("axis")
        if axis is not None and not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)


@_register("reduce_mean")
class _ReduceMean:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        return np.asarray(x.mean(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))), None

    @staticmethod
    def backward(g, xs, out, saved, attrs):
        x = xs[0]
        axis = attrs.get("axis")
        if axis is None:
            count = x.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([x.shape[a] for a in axes]))
            if not attrs.get("keepdims", False):
                g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)


# ---------------------------------------------------------------------------
# recording and backward
# ---------------------------------------------------------------------------


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Evaluate primitive ``kind`` and record it if any input requires grad."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {kind!r}") from None
    attrs = attrs or {}
    inputs = tuple(inputs)
    if prim.n_inputs is not None and len(inputs) != prim.n_inputs:
        raise AutodiffError(f"{kind}: expected {prim.n_inputs} inputs, got {len(inputs)}")
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{kind}: inputs must be Tensor, got {type(t).__name__}")
    out_data, saved = prim.forward([t.data for t in inputs], attrs)
    out = Tensor._wrap(np.asarray(out_data))
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = _next_id()
        current_tape().record(Node(out.node_id, kind, inputs, attrs, saved, out.data))
    return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Back-propagate from scalar ``loss`` through the current tape.

    Returns a mapping from node id to gradient array for every tensor that
    received a gradient. Leaf tensors also accumulate into ``.grad``. The tape
    is reset afterwards, so a second call on the same loss raises.
    """
    if loss.shape != ():
        raise BackwardError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    tape = current_tape()
    if loss.node_id is None or loss.node_id not in tape:
        raise BackwardError("loss is detached: it was not produced on the current tape")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    produced = tape._outputs
    for node in reversed(tape.nodes):
        g = grads.get(node.node_id)
        if g is None:
            continue
        prim = PRIMITIVES[node.kind]
        in_grads = prim.backward(g, [t.data for t in node.inputs], node.out_data, node.saved, node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi
            if t.node_id not in produced:
                leaves[t.node_id] = t
    for nid, t in leaves.items():
        g = grads[nid]
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.reset()
    return grads


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_entries: int | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    The per-entry error is ``|a - n| / max(floor * max(1, |f|), |a| + |n|)``. The
    floor keeps gradients that are exactly zero (where the difference quotient is
    pure rounding noise, proportional to ``|f| / eps``) from reading as large
    relative errors; scaling it by ``|f|`` makes the check indifferent to the
    overall scale of ``f``. ``f`` takes no
    arguments and must be deterministic; ``params`` are perturbed in place and
    restored. ``max_entries`` optionally caps the entries probed per tensor
    (chosen with a seeded generator); by default every entry is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    current_tape().reset()
    saved_grads = [p.grad for p in params]
    zero_grad(params)
    loss = f()
    backward(loss)
    denom_floor = floor * max(1.0, abs(float(loss.data)))
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved_grads):
        p.grad = g

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.flat
            idx = np.arange(p.data.size)
            if max_entries is not None and p.data.size > max_entries:
                idx = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
            a_flat = a.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                err = abs(a_flat[i] - num) / max(denom_floor, abs(a_flat[i]) + abs(num))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# functional helpers
# ---------------------------------------------------------------------------


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def softplus(x: Tensor) -> Tensor:
    return apply_primitive("softplus", [x])


def sin(x: Tensor) -> Tensor:
    return apply_primitive("sin", [x])


def cos(x: Tensor) -> Tensor:
    return apply_primitive("cos", [x])


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return apply_primitive("clip", [x], {"lo": float(lo), "hi": float(hi)})


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [x], {"axis": axis})


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer_norm", [x], {"eps": eps})


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(xs), {"axis": axis})


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array."""
    key = [slice(None)] * x.ndim
    key[axis] = np.asarray(index, dtype=np.intp)
    return apply_primitive("slice", [x], {"key": tuple(key)})
