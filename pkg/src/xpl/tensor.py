"""Minimal dense tensors with a reverse-mode autodiff tape.

Covers exactly the operations the localization losses need. Every op works in
two modes: applied to plain ``Tensor`` values it evaluates eagerly, applied to
``TracedTensor`` handles it also records a node on the owning ``Tape`` so that
``backward`` can later produce gradients. ``finite_diff_check`` is the
independent oracle used to validate every traced gradient.

Design notes
------------
* float64 everywhere; gradient checks at 1e-4 tolerance are unreliable in
  32-bit.
* The tape is a flat append-only node list; node ids are the topological
  order, and backward walks ids in strictly decreasing order. No graph
  rewriting.
* ``reduce_max`` breaks ties toward the lowest flat index (numpy argmax
  convention). The contrastive loss gradient depends on this, so it is part
  of the contract.
* Constants lifted onto a tape (targets, inputs) never receive gradients:
  that is how stop-gradient semantics for pseudo-label targets are enforced
  structurally.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Immutable dense float64 array with positive dimension sizes."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tensor values must be finite (no NaN/Inf)")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Trusted path for freshly computed op outputs: validates but skips the
        # defensive copy of __init__.
        arr = np.asarray(arr, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tensor values must be finite (no NaN/Inf)")
        arr.setflags(write=False)
        out = cls.__new__(cls)
        out.data = arr
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.shape != ():
            raise ValueError(f"item() requires a scalar tensor, got shape {self.data.shape}")
        return float(self.data)

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # Operator sugar shared with TracedTensor.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded operation: kind, input node ids, cached output value."""

    __slots__ = ("op", "inputs", "value", "ctx")

    def __init__(self, op: str, inputs: tuple[int, ...], value: Tensor, ctx=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx


class Tape:
    """Append-only computation graph; node ids double as topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, op: str, inputs: tuple[int, ...], value: Tensor, ctx=None) -> "TracedTensor":
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError("op inputs must already be on the tape")
        self.nodes.append(Node(op, inputs, value, ctx))
        return TracedTensor(self, len(self.nodes) - 1)

    def leaf(self, value) -> "TracedTensor":
        """Register a differentiable parameter."""
        return self._record("leaf", (), _as_tensor(value))

    def const(self, value) -> "TracedTensor":
        """Register a non-differentiable input (stop-gradient)."""
        return self._record("const", (), _as_tensor(value))


class TracedTensor:
    """Handle to one node of a Tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> Tensor:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return self.value.item()

    def __repr__(self) -> str:
        return f"TracedTensor(idx={self.idx}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _find_tape(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, TracedTensor):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _apply(op: str, args, forward):
    """Run `forward` on raw arrays; record a node when any arg is traced."""
    tape = _find_tape(args)
    tensors = [a.value if isinstance(a, TracedTensor) else _as_tensor(a) for a in args]
    value, ctx = forward(*[t.data for t in tensors])
    out = Tensor._wrap(value)
    if tape is None:
        return out
    idxs = []
    for a, t in zip(args, tensors):
        idxs.append(a.idx if isinstance(a, TracedTensor) else tape.const(t).idx)
    return tape._record(op, tuple(idxs), out, ctx)


def _check_elementwise_shapes(op: str, sa: tuple, sb: tuple) -> None:
    # Only scalar-with-tensor broadcasting is supported.
    if sa != sb and sa != () and sb != ():
        raise ValueError(f"{op}: shape mismatch {sa} vs {sb}")


def add(a, b):
    def fwd(x, y):
        _check_elementwise_shapes("add", x.shape, y.shape)
        return x + y, None

    return _apply("add", (a, b), fwd)


def sub(a, b):
    def fwd(x, y):
        _check_elementwise_shapes("sub", x.shape, y.shape)
        return x - y, None

    return _apply("sub", (a, b), fwd)


def mul(a, b):
    def fwd(x, y):
        _check_elementwise_shapes("mul", x.shape, y.shape)
        return x * y, None

    return _apply("mul", (a, b), fwd)


def scalar_mul(a, s: float):
    """Multiply a tensor by a python scalar."""
    if not isinstance(s, (int, float)):
        raise TypeError("scalar_mul expects a python number")
    return mul(a, float(s))


def matmul(a, b):
    def fwd(x, y):
        if x.ndim != 2 or y.ndim != 2:
            raise ValueError(f"matmul requires 2-D operands, got {x.shape} and {y.shape}")
        if x.shape[1] != y.shape[0]:
            raise ValueError(f"matmul inner dimensions differ: {x.shape} vs {y.shape}")
        return x @ y, None

    return _apply("matmul", (a, b), fwd)


def relu(x):
    return _apply("relu", (x,), lambda v: (np.maximum(v, 0.0), None))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    def fwd(v):
        y = _sigmoid(np.atleast_1d(v)).reshape(v.shape)
        return y, y

    return _apply("sigmoid", (x,), fwd)


def log(x):
    def fwd(v):
        if not (v > 0).all():
            raise ValueError("log requires strictly positive inputs")
        return np.log(v), None

    return _apply("log", (x,), fwd)


def exp(x):
    def fwd(v):
        y = np.exp(v)
        return y, y

    return _apply("exp", (x,), fwd)


def tensor_sum(x, axis: int | None = None):
    def fwd(v):
        if axis is not None and not -v.ndim <= axis < v.ndim:
            raise ValueError(f"sum: axis {axis} invalid for shape {v.shape}")
        return np.sum(v, axis=axis), axis

    return _apply("sum", (x,), fwd)


def mean(x):
    """Mean over all elements (sum composed with a scalar multiply)."""
    n = (x.value if isinstance(x, TracedTensor) else _as_tensor(x)).size
    return mul(tensor_sum(x), 1.0 / n)


def reduce_max(x, axis: int | None = None):
    """Max along an axis (or all elements); subgradient goes to the first argmax."""

    def fwd(v):
        if axis is None:
            am = int(np.argmax(v))
            return np.max(v), (None, am)
        if not -v.ndim <= axis < v.ndim:
            raise ValueError(f"reduce_max: axis {axis} invalid for shape {v.shape}")
        ax = axis % v.ndim
        am = np.argmax(v, axis=ax)
        return np.max(v, axis=ax), (ax, am)

    return _apply("reduce_max", (x,), fwd)


def log_sum_exp(x, axis: int | None = None):
    """Numerically stable (max-shifted) log-sum-exp."""

    def fwd(v):
        if axis is None:
            m = np.max(v)
            return m + np.log(np.sum(np.exp(v - m))), None
        if not -v.ndim <= axis < v.ndim:
            raise ValueError(f"log_sum_exp: axis {axis} invalid for shape {v.shape}")
        ax = axis % v.ndim
        m = np.max(v, axis=ax, keepdims=True)
        return (m + np.log(np.sum(np.exp(v - m), axis=ax, keepdims=True))).squeeze(ax), ax

    return _apply("log_sum_exp", (x,), fwd)


def _row_norms(m: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(m, axis=-1)
    if not (n > 0).all():
        raise ValueError(f"zero-norm {what} (degenerate embedding)")
    return n


def cosine_sim(u, v):
    """Cosine similarity of two 1-D vectors; output clamped to [-1, 1]."""

    def fwd(a, b):
        if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
            raise ValueError(f"cosine_sim requires equal-length 1-D vectors, got {a.shape}, {b.shape}")
        na = np.linalg.norm(a)
        nb = np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ValueError("zero-norm input to cosine_sim (degenerate embedding)")
        c = float(a @ b) / (na * nb)
        return np.float64(min(1.0, max(-1.0, c))), (a, b, na, nb, c)

    return _apply("cosine_sim", (u, v), fwd)


def cosine_matrix(a, b):
    """All-pairs cosine similarity: (n,d) x (m,d) -> (n,m), clamped to [-1, 1]."""

    def fwd(x, y):
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
            raise ValueError(f"cosine_matrix requires (n,d) and (m,d), got {x.shape}, {y.shape}")
        nx = _row_norms(x, "row in cosine_matrix")
        ny = _row_norms(y, "row in cosine_matrix")
        xn = x / nx[:, None]
        yn = y / ny[:, None]
        s = np.clip(xn @ yn.T, -1.0, 1.0)
        return s, (xn, yn, nx, ny)

    return _apply("cosine_matrix", (a, b), fwd)


def cosine_grid(cells, vecs):
    """Per-batch cosine of grid rows against one vector: (B,m,d) x (B,d) -> (B,m)."""

    def fwd(v, a):
        if v.ndim != 3 or a.ndim != 2 or v.shape[0] != a.shape[0] or v.shape[2] != a.shape[1]:
            raise ValueError(f"cosine_grid requires (B,m,d) and (B,d), got {v.shape}, {a.shape}")
        nv = _row_norms(v, "cell embedding in cosine_grid")
        na = _row_norms(a, "vector in cosine_grid")
        vn = v / nv[..., None]
        an = a / na[:, None]
        s = np.clip(np.einsum("bmd,bd->bm", vn, an), -1.0, 1.0)
        return s, (vn, an, nv, na)

    return _apply("cosine_grid", (cells, vecs), fwd)


def stack(items):
    """Stack same-shaped tensors along a new leading axis."""
    items = list(items)
    if not items:
        raise ValueError("stack of empty sequence")
    tape = _find_tape(items)
    tensors = [it.value if isinstance(it, TracedTensor) else _as_tensor(it) for it in items]
    shape0 = tensors[0].shape
    for t in tensors:
        if t.shape != shape0:
            raise ValueError(f"stack: mixed shapes {shape0} vs {t.shape}")
    out = Tensor._wrap(np.stack([t.data for t in tensors], axis=0))
    if tape is None:
        return out
    idxs = tuple(
        it.idx if isinstance(it, TracedTensor) else tape.const(t).idx
        for it, t in zip(items, tensors)
    )
    return tape._record("stack", idxs, out, None)


def reshape(x, shape):
    shape = tuple(int(d) for d in shape)

    def fwd(v):
        if int(np.prod(shape, dtype=np.int64)) != v.size:
            raise ValueError(f"reshape: cannot view {v.shape} as {shape}")
        return v.reshape(shape), v.shape

    return _apply("reshape", (x,), fwd)


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; zero subgradient outside the open interval."""
    if not lo < hi:
        raise ValueError("clip requires lo < hi")

    def fwd(v):
        return np.clip(v, lo, hi), (v, lo, hi)

    return _apply("clip", (x,), fwd)


def tile_rows(b, m: int):
    """Repeat a 1-D vector as the rows of an (m, n) matrix."""
    if m < 1:
        raise ValueError("tile_rows requires m >= 1")

    def fwd(v):
        if v.ndim != 1:
            raise ValueError(f"tile_rows requires a 1-D vector, got shape {v.shape}")
        return np.tile(v, (m, 1)), None

    return _apply("tile_rows", (b,), fwd)


def narrow(x, start: int, length: int):
    """Contiguous slice [start, start+length) along axis 0."""

    def fwd(v):
        if v.ndim < 1:
            raise ValueError("narrow requires at least 1-D input")
        if not (0 <= start and length >= 1 and start + length <= v.shape[0]):
            raise ValueError(f"narrow: range [{start}, {start + length}) out of bounds for axis of size {v.shape[0]}")
        return v[start : start + length], (start, length)

    return _apply("narrow", (x,), fwd)


def diagonal(x):
    def fwd(v):
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"diagonal requires a square matrix, got {v.shape}")
        return np.diagonal(v).copy(), None

    return _apply("diagonal", (x,), fwd)


def _grad_for_elementwise(g: np.ndarray, input_shape: tuple) -> np.ndarray:
    # Reverse of scalar-with-tensor broadcasting.
    if input_shape == () and g.shape != ():
        return np.sum(g)
    return g


def _vjp(node: Node, tape: Tape, g: np.ndarray):
    """Gradients of one node's output wrt each of its inputs."""
    op = node.op
    vals = [tape.nodes[i].value.data for i in node.inputs]

    if op == "add":
        return [_grad_for_elementwise(g, v.shape) for v in vals]
    if op == "sub":
        return [_grad_for_elementwise(g, vals[0].shape), _grad_for_elementwise(-g, vals[1].shape)]
    if op == "mul":
        return [
            _grad_for_elementwise(g * vals[1], vals[0].shape),
            _grad_for_elementwise(g * vals[0], vals[1].shape),
        ]
    if op == "matmul":
        return [g @ vals[1].T, vals[0].T @ g]
    if op == "relu":
        return [g * (vals[0] > 0)]
    if op == "sigmoid":
        y = node.ctx
        return [g * y * (1.0 - y)]
    if op == "log":
        return [g / vals[0]]
    if op == "exp":
        return [g * node.ctx]
    if op == "sum":
        axis = node.ctx
        if axis is None:
            return [np.full(vals[0].shape, g)]
        ax = axis % vals[0].ndim
        return [np.broadcast_to(np.expand_dims(g, ax), vals[0].shape).copy()]
    if op == "reduce_max":
        ax, am = node.ctx
        gx = np.zeros_like(vals[0])
        if ax is None:
            gx.flat[am] = g
        else:
            np.put_along_axis(gx, np.expand_dims(am, ax), np.expand_dims(g, ax), axis=ax)
        return [gx]
    if op == "log_sum_exp":
        ax = node.ctx
        x = vals[0]
        y = node.value.data
        if ax is None:
            return [g * np.exp(x - y)]
        soft = np.exp(x - np.expand_dims(y, ax))
        return [np.expand_dims(g, ax) * soft]
    if op == "cosine_sim":
        a, b, na, nb, c = node.ctx
        ga = g * (b / (na * nb) - c * a / (na * na))
        gb = g * (a / (na * nb) - c * b / (nb * nb))
        return [ga, gb]
    if op == "cosine_matrix":
        xn, yn, nx, ny = node.ctx
        gxn = g @ yn
        gyn = g.T @ xn
        gx = (gxn - np.sum(gxn * xn, axis=1, keepdims=True) * xn) / nx[:, None]
        gy = (gyn - np.sum(gyn * yn, axis=1, keepdims=True) * yn) / ny[:, None]
        return [gx, gy]
    if op == "cosine_grid":
        vn, an, nv, na = node.ctx
        gvn = g[..., None] * an[:, None, :]
        gan = np.einsum("bm,bmd->bd", g, vn)
        gv = (gvn - np.sum(gvn * vn, axis=-1, keepdims=True) * vn) / nv[..., None]
        ga = (gan - np.sum(gan * an, axis=-1, keepdims=True) * an) / na[:, None]
        return [gv, ga]
    if op == "stack":
        return [g[i] for i in range(len(node.inputs))]
    if op == "reshape":
        return [g.reshape(node.ctx)]
    if op == "clip":
        v, lo, hi = node.ctx
        return [g * ((v > lo) & (v < hi))]
    if op == "tile_rows":
        return [g.sum(axis=0)]
    if op == "narrow":
        start, length = node.ctx
        gx = np.zeros_like(vals[0])
        gx[start : start + length] = g
        return [gx]
    if op == "diagonal":
        gx = np.zeros_like(vals[0])
        np.fill_diagonal(gx, g)
        return [gx]
    raise AssertionError(f"no vjp for op {op!r}")


def backward(tape: Tape, root) -> dict[int, Tensor]:
    """Gradients of a scalar root wrt every reachable leaf, keyed by node id.

    Constants are skipped by design: values lifted with ``Tape.const`` (inputs,
    pseudo-label targets) never appear in the result, which is the stop-gradient
    guarantee the losses rely on.
    """
    ridx = root.idx if isinstance(root, TracedTensor) else int(root)
    if not 0 <= ridx < len(tape.nodes):
        raise ValueError("backward root is not on this tape")
    if tape.nodes[ridx].value.shape != ():
        raise ValueError(f"backward requires a scalar root, got shape {tape.nodes[ridx].value.shape}")

    pending: dict[int, np.ndarray] = {ridx: np.ones(())}
    leaf_grads: dict[int, Tensor] = {}
    for idx in range(ridx, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.op == "leaf":
            leaf_grads[idx] = Tensor(g)
            continue
        if node.op == "const":
            continue
        for in_idx, gin in zip(node.inputs, _vjp(node, tape, g)):
            if tape.nodes[in_idx].op == "const":
                continue
            acc = pending.get(in_idx)
            pending[in_idx] = gin.astype(np.float64, copy=True) if acc is None else acc + gin
    return leaf_grads


def _scalar_value(x) -> float:
    if isinstance(x, (TracedTensor, Tensor)):
        return x.item()
    return float(x)


def finite_diff_check(f, theta, h: float = 1e-5) -> float:
    """Max relative error between traced gradients of ``f`` and central differences.

    ``f`` must map one parameter tensor to a scalar and be evaluable both on a
    ``TracedTensor`` (for the analytic gradient) and on plain ``Tensor`` values
    (for the difference quotients). Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    theta = _as_tensor(theta)
    tape = Tape()
    out = f(tape.leaf(theta))
    if not isinstance(out, TracedTensor):
        raise ValueError("finite_diff_check: f must return a traced scalar")
    grads = backward(tape, out)
    analytic = grads.get(0)
    ga = analytic.data.ravel() if analytic is not None else np.zeros(theta.size)

    base = theta.data.ravel().copy()
    worst = 0.0
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + h
        fp = _scalar_value(f(Tensor(base.reshape(theta.shape))))
        base[i] = orig - h
        fm = _scalar_value(f(Tensor(base.reshape(theta.shape))))
        base[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(ga[i] - numeric) / max(1.0, abs(ga[i]))
        worst = max(worst, err)
    return worst
