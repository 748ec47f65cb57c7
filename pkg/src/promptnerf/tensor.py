"""Dense float64 tensors with reverse-mode automatic differentiation.

A dynamic tape is rebuilt per forward pass: every operation stores its
parent tensors and a vector-Jacobian closure on the output tensor, and
``backward`` walks the resulting DAG once in reverse topological order.
Broadcasting is restricted to scalar-tensor combinations plus the explicit
row/column-vector helpers; everything else must shape-match exactly.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the operation."""


class GraphError(RuntimeError):
    """The autodiff graph was used incorrectly (e.g. double backward)."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus the tape metadata needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps = ()
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def reset_grad(self) -> None:
        self.grad = None
        self._backward_done = False

    def backward(self):
        return backward(self)

    # operator sugar; scalars are the only permitted implicit broadcast
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(Tensor(np.full(self.shape, float(other))), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, op: str, parents, vjps) -> Tensor:
    """Wrap an op result; the tape entry is dropped when no parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
        out._op = op
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ---------------------------------------------------------------------------
# binary / unary elementwise ops


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _coerce(a)
        return _make(a.data + float(b), "add_scalar", (a,), (lambda g: g,))
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = _coerce(a), _coerce(b)
    _check_same_shape("add", a, b)
    return _make(a.data + b.data, "add", (a, b), (lambda g: g, lambda g: g))


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _coerce(a)
        return _make(a.data - float(b), "sub_scalar", (a,), (lambda g: g,))
    a, b = _coerce(a), _coerce(b)
    _check_same_shape("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b), (lambda g: g, lambda g: -g))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    if isinstance(a, (int, float)):
        return scale(b, float(a))
    a, b = _coerce(a), _coerce(b)
    _check_same_shape("mul", a, b)
    return _make(a.data * b.data, "mul", (a, b), (lambda g: g * b.data, lambda g: g * a.data))


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, 1.0 / float(b))
    a, b = _coerce(a), _coerce(b)
    _check_same_shape("div", a, b)
    inv = 1.0 / b.data
    return _make(
        a.data * inv,
        "div",
        (a, b),
        (lambda g: g * inv, lambda g: -g * a.data * inv * inv),
    )


def scale(t, c: float) -> Tensor:
    t = _coerce(t)
    c = float(c)
    return _make(t.data * c, "scale", (t,), (lambda g: g * c,))


def relu(t) -> Tensor:
    t = _coerce(t)
    mask = t.data > 0.0
    return _make(np.where(mask, t.data, 0.0), "relu", (t,), (lambda g: g * mask,))


def sigmoid(t) -> Tensor:
    t = _coerce(t)
    s = 1.0 / (1.0 + np.exp(-t.data))
    return _make(s, "sigmoid", (t,), (lambda g: g * s * (1.0 - s),))


def tanh(t) -> Tensor:
    t = _coerce(t)
    y = np.tanh(t.data)
    return _make(y, "tanh", (t,), (lambda g: g * (1.0 - y * y),))


def exp(t) -> Tensor:
    t = _coerce(t)
    y = np.exp(t.data)
    return _make(y, "exp", (t,), (lambda g: g * y,))


def log(t) -> Tensor:
    t = _coerce(t)
    if np.any(t.data <= 0.0):
        raise DomainError("log: input has non-positive entries")
    return _make(np.log(t.data), "log", (t,), (lambda g: g / t.data,))


def sqrt(t) -> Tensor:
    t = _coerce(t)
    if np.any(t.data < 0.0):
        raise DomainError("sqrt: input has negative entries")
    y = np.sqrt(t.data)
    return _make(y, "sqrt", (t,), (lambda g: g * 0.5 / y,))


def softplus(t) -> Tensor:
    t = _coerce(t)
    # overflow-safe: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    y = np.maximum(t.data, 0.0) + np.log1p(np.exp(-np.abs(t.data)))
    s = 1.0 / (1.0 + np.exp(-t.data))
    return _make(y, "softplus", (t,), (lambda g: g * s,))


def square(t) -> Tensor:
    t = _coerce(t)
    return _make(t.data * t.data, "square", (t,), (lambda g: g * 2.0 * t.data,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "scale": scale,
    "sqrt": sqrt,
    "softplus": softplus,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name; mirrors the individual op functions."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _ELEMENTWISE[kind](*operands)


# ---------------------------------------------------------------------------
# matrix / vector ops


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data,
        "matmul",
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def transpose(t) -> Tensor:
    t = _coerce(t)
    if t.data.ndim != 2:
        raise ShapeError(f"transpose: expected matrix, got shape {t.shape}")
    return _make(t.data.T.copy(), "transpose", (t,), (lambda g: g.T,))


def add_rowvec(mat, vec) -> Tensor:
    """mat[i, :] + vec — the one row-broadcast needed for bias terms."""
    mat, vec = _coerce(mat), _coerce(vec)
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.shape[1] != vec.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {mat.shape} and {vec.shape}")
    return _make(
        mat.data + vec.data[None, :],
        "add_rowvec",
        (mat, vec),
        (lambda g: g, lambda g: g.sum(axis=0)),
    )


def mul_rowvec(mat, vec) -> Tensor:
    """mat[i, :] * vec — per-column gain (layer-norm scale)."""
    mat, vec = _coerce(mat), _coerce(vec)
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.shape[1] != vec.shape[0]:
        raise ShapeError(f"mul_rowvec: shapes {mat.shape} and {vec.shape}")
    return _make(
        mat.data * vec.data[None, :],
        "mul_rowvec",
        (mat, vec),
        (lambda g: g * vec.data[None, :], lambda g: (g * mat.data).sum(axis=0)),
    )


def reshape(t, shape) -> Tensor:
    t = _coerce(t)
    old = t.shape
    try:
        data = t.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {old} -> {shape}: {e}") from None
    return _make(data, "reshape", (t,), (lambda g: g.reshape(old),))


def slice_cols(t, start: int, stop: int) -> Tensor:
    t = _coerce(t)
    if t.data.ndim != 2 or not (0 <= start < stop <= t.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] on shape {t.shape}")

    def vjp(g):
        full = np.zeros_like(t.data)
        full[:, start:stop] = g
        return full

    return _make(t.data[:, start:stop].copy(), "slice_cols", (t,), (vjp,))


def slice_rows(t, start: int, stop: int) -> Tensor:
    t = _coerce(t)
    if t.data.ndim != 2 or not (0 <= start < stop <= t.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] on shape {t.shape}")

    def vjp(g):
        full = np.zeros_like(t.data)
        full[start:stop, :] = g
        return full

    return _make(t.data[start:stop, :].copy(), "slice_rows", (t,), (vjp,))


def concat_cols(parts) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols: all operands must be matrices")
    widths = [p.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def make_vjp(i):
        return lambda g: g[:, offsets[i] : offsets[i + 1]]

    return _make(
        np.concatenate([p.data for p in parts], axis=1),
        "concat_cols",
        tuple(parts),
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def cumsum_exclusive(t, axis: int) -> Tensor:
    """Exclusive running sum along axis (entry k sums indices < k)."""
    t = _coerce(t)
    if not (-t.data.ndim <= axis < t.data.ndim):
        raise ShapeError(f"cumsum_exclusive: axis {axis} out of range for shape {t.shape}")
    inc = np.cumsum(t.data, axis=axis)
    out = inc - t.data  # exclusive = inclusive shifted by one

    def vjp(g):
        # d out_k / d in_j = 1 for j < k: reverse inclusive cumsum minus self
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return rev - g

    return _make(out, "cumsum_exclusive", (t,), (vjp,))


def softmax_rows(t, bias: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax of a matrix, with an optional additive mask bias."""
    t = _coerce(t)
    if t.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected matrix, got shape {t.shape}")
    z = t.data if bias is None else t.data + bias
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (g - dot) * s

    return _make(s, "softmax_rows", (t,), (vjp,))


def layernorm_rows(t, eps: float = 1e-6) -> Tensor:
    """Normalize each row to zero mean and unit variance (no affine part)."""
    t = _coerce(t)
    if t.data.ndim != 2:
        raise ShapeError(f"layernorm_rows: expected matrix, got shape {t.shape}")
    n = t.shape[1]
    mu = t.data.mean(axis=1, keepdims=True)
    xc = t.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return inv * (g - gm - y * gym)

    _ = n
    return _make(y, "layernorm_rows", (t,), (vjp,))


# ---------------------------------------------------------------------------
# reductions


def _reduce_guard(t: Tensor, axis) -> None:
    if axis is not None and not (-t.data.ndim <= axis < t.data.ndim):
        raise ShapeError(f"reduce: axis {axis} out of range for shape {t.shape}")


def tsum(t, axis=None) -> Tensor:
    t = _coerce(t)
    _reduce_guard(t, axis)
    shape = t.shape

    def vjp(g):
        if axis is None:
            return np.full(shape, g)
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _make(t.data.sum(axis=axis), "sum", (t,), (vjp,))


def tmean(t, axis=None) -> Tensor:
    t = _coerce(t)
    _reduce_guard(t, axis)
    n = t.data.size if axis is None else t.shape[axis]
    if n == 0:
        raise DomainError("mean: reduction over empty extent")
    return scale(tsum(t, axis=axis), 1.0 / n)


def sum_sq(t, axis=None) -> Tensor:
    t = _coerce(t)
    _reduce_guard(t, axis)
    shape = t.shape

    def vjp(g):
        if axis is None:
            return 2.0 * t.data * g
        return 2.0 * t.data * np.expand_dims(g, axis)

    _ = shape
    return _make((t.data * t.data).sum(axis=axis), "sum_sq", (t,), (vjp,))


_REDUCE = {"sum": tsum, "mean": tmean, "sum_sq": sum_sq}


def reduce(kind: str, t, axis=None) -> Tensor:
    if kind not in _REDUCE:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return _REDUCE[kind](t, axis=axis)


# ---------------------------------------------------------------------------
# backward


def _toposort(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Populate ``grad`` for every tensor reachable from a scalar loss.

    Returns a map from ``id(tensor)`` to its gradient array. Touches each
    graph node exactly once; calling it twice on the same loss, or on a
    graph whose leaves still hold gradients, is an error.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not require grad")
    if loss._backward_done:
        raise GraphError("backward: already called on this loss; reset grads first")
    order = _toposort(loss)
    for node in order:
        if not node._parents and node.grad is not None:
            raise GraphError("backward: a leaf already holds a gradient; reset grads first")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    visits = 0
    result: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        visits += 1
        node.grad = g
        result[id(node)] = g
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    loss._backward_done = True
    backward.last_visit_count = visits
    return result


backward.last_visit_count = 0


def reset_grads(params) -> None:
    for p in params:
        p.reset_grad()


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """Per-parameter Adam moments plus hyperparameters."""

    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0.0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.first_moment = [np.zeros(s) for s in shapes]
        self.second_moment = [np.zeros(s) for s in shapes]
        self.step_count = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("adam_step: params/grads/state length mismatch")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        arr = p.data if isinstance(p, Tensor) else p
        if arr.shape != g.shape or arr.shape != m.shape:
            raise ShapeError(f"adam_step: shape mismatch {arr.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        arr -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """Convenience wrapper owning a parameter list of Tensors."""

    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState([p.shape for p in self.params], lr, beta1, beta2, eps)

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                grads.append(np.zeros(p.shape))
            else:
                grads.append(p.grad)
        adam_step(self.params, grads, self.state)

    def reset_grads(self) -> None:
        reset_grads(self.params)
