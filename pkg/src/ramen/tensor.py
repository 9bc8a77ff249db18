"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable computation in this package flows through the ops in
this module (or through fused ops registered with :func:`record`), so each
gradient rule is small enough to audit and to verify against central finite
differences.

Two precisions are supported: float32 is the training default, float64 is
used for gradient checks where finite differences need the headroom. An op
never mixes dtypes silently; pass matching tensors.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import NumericError

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)

# Optional debug guard: when enabled, every op output is scanned for NaN/Inf.
_nan_guard = False


def set_nan_guard(enabled: bool) -> None:
    global _nan_guard
    _nan_guard = bool(enabled)


class Tensor:
    """A dense real array with an optional gradient slot.

    `data` is an ndarray (any shape, row-major); `grad` is either None or an
    ndarray of the same shape. A tensor is written once by the op that
    produces it and treated as immutable afterwards; only `grad` accumulates.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, np.ndarray) and arr.dtype in _FLOAT_DTYPES):
            # Lists and integer arrays take the training default; explicitly
            # float ndarrays keep their precision.
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Copy, not adopt: rules may hand the same array to two inputs.
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded op: the output it produced, its inputs, and the rule that
    maps the output gradient to per-input gradients (None for an input that
    does not require one)."""

    __slots__ = ("out", "inputs", "rule", "name")

    def __init__(self, out: Tensor, inputs, rule, name: str):
        self.out = out
        self.inputs = inputs
        self.rule = rule
        self.name = name


class Tape:
    """Ordered record of ops. Eager execution appends nodes as they run, so
    the list is topologically sorted by construction: every node's inputs
    were produced (and recorded, if differentiable) before the node itself.

    A tape is single-owner; use one per training step via `with Tape():`.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self
        return False


_tape_stack: list[Tape] = [Tape()]  # bottom entry is the default tape
_grad_enabled = True


def active_tape() -> Tape:
    return _tape_stack[-1]


class no_grad:
    """Context manager that disables recording (eval-only forward passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def record(out_data: np.ndarray, inputs, rule, name: str) -> Tensor:
    """Finalize an op: wrap `out_data`, and if grad mode is on and any input
    requires a gradient, push a node onto the active tape.

    `rule(g)` must return a sequence of gradients aligned with `inputs`
    (entries for non-requires-grad inputs are ignored and may be None).
    Fused ops outside this module (batchnorm, losses) register through here.
    """
    if _nan_guard and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values in output of op '{name}'")
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        active_tape().nodes.append(TapeNode(out, tuple(inputs), rule, name))
    return out


def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires-grad tensor reachable from `loss`.

    `loss` must be a scalar produced on the active tape. The tape is walked
    exactly once, in reverse recording order; tensors not reachable from the
    loss keep their grad slot absent.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    start = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].out is loss:
            start = i
            break
    if start is None:
        if not loss.requires_grad:
            raise ValueError("loss is not on the tape (no grad path to it)")
        raise ValueError("loss was not produced on the active tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: start + 1]):
        g = node.out.grad
        if g is None:
            continue  # not on a path to the loss
        grads = node.rule(g)
        for t, gi in zip(node.inputs, grads):
            # Interior tensors carry requires_grad=True (set by record), so
            # this also routes gradients through the middle of the graph.
            if gi is not None and t.requires_grad:
                t.accumulate_grad(gi)


def _check_same_dtype(name, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ValueError(f"{name}: mixed dtypes {dt} and {t.dtype}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of same-shape tensors."""
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def one_minus(a: Tensor) -> Tensor:
    """1 - a, used for gate complements."""
    return record(a.dtype.type(1.0) - a.data, (a,), lambda g: (-g,), "one_minus")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x); d/dx = s(x) * (1 + x * (1 - s(x)))."""
    x = a.data
    s = expit(x)
    out = x * s
    return record(out, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "swish")


# ---------------------------------------------------------------------------
# matrix ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product [m,k] @ [k,n]; d a = g @ b^T, d b = a^T @ g."""
    _check_same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    return record(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b^T for 2-d operands; avoids materializing the transpose."""
    _check_same_dtype("matmul_nt", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul_nt needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"matmul_nt: inner dimensions disagree, {a.shape} x {b.shape}^T")
    return record(
        a.data @ b.data.T,
        (a, b),
        lambda g: (g @ b.data, g.T @ a.data),
        "matmul_nt",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused x @ W^T + b for x [rows,in], W [out,in], b [out].

    The one place broadcasting is allowed: the bias row expands over rows.
    """
    _check_same_dtype("linear", x, weight, bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError(
            f"linear: need x 2-d, W 2-d, b 1-d; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ValueError(
            f"linear: shape mismatch x{x.shape} W{weight.shape} b{bias.shape}"
        )
    out = x.data @ weight.data.T
    out += bias.data
    return record(
        out,
        (x, weight, bias),
        lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)),
        "linear",
    )


# ---------------------------------------------------------------------------
# shape ops


def concat(parts, axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis`; gradient slices back to each part."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat of an empty list")
    _check_same_dtype("concat", *parts)
    ndim = parts[0].data.ndim
    for p in parts:
        if p.data.ndim != ndim:
            raise ValueError(
                f"concat: rank mismatch {[tuple(q.shape) for q in parts]}"
            )
    if not 0 <= axis < ndim:
        raise ValueError(f"concat: axis {axis} out of range for rank {ndim}")
    for p in parts[1:]:
        for d in range(ndim):
            if d != axis and p.shape[d] != parts[0].shape[d]:
                raise ValueError(
                    f"concat: incompatible shapes {[tuple(q.shape) for q in parts]} on axis {axis}"
                )
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), rule, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    return record(
        a.data.reshape(shape).copy(),
        (a,),
        lambda g: (g.reshape(a.shape),),
        "reshape",
    )


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-d tensor; gradient scatter-adds back (rows may repeat)."""
    if a.data.ndim != 2:
        raise ValueError(f"gather_rows needs a 2-d tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows: indices must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def rule(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return record(a.data[idx], (a,), rule, "gather_rows")


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Repeat each row of [r,d] n times consecutively, giving [r*n,d]."""
    if a.data.ndim != 2:
        raise ValueError(f"repeat_rows needs a 2-d tensor, got {a.shape}")
    if n < 1:
        raise ValueError("repeat_rows: n must be >= 1")
    r, d = a.shape
    return record(
        np.repeat(a.data, n, axis=0),
        (a,),
        lambda g: (g.reshape(r, n, d).sum(axis=1),),
        "repeat_rows",
    )


def group_mean_rows(a: Tensor, n: int) -> Tensor:
    """Mean over consecutive groups of n rows: [r*n,d] -> [r,d]."""
    if a.data.ndim != 2:
        raise ValueError(f"group_mean_rows needs a 2-d tensor, got {a.shape}")
    rows, d = a.shape
    if n < 1 or rows % n != 0:
        raise ValueError(f"group_mean_rows: {rows} rows not divisible into groups of {n}")
    r = rows // n
    out = a.data.reshape(r, n, d).mean(axis=1)
    return record(
        out,
        (a,),
        lambda g: (np.repeat(g / n, n, axis=0),),
        "group_mean_rows",
    )


def scale_rows(a: Tensor, row_weights: np.ndarray) -> Tensor:
    """Multiply each row of [r,d] by a constant per-row weight (no grad path
    through the weights; used for sequence masks)."""
    if a.data.ndim != 2:
        raise ValueError(f"scale_rows needs a 2-d tensor, got {a.shape}")
    w = np.asarray(row_weights, dtype=a.dtype).reshape(-1, 1)
    if w.shape[0] != a.shape[0]:
        raise ValueError(f"scale_rows: {w.shape[0]} weights for {a.shape[0]} rows")
    return record(a.data * w, (a,), lambda g: (g * w,), "scale_rows")


# ---------------------------------------------------------------------------
# reductions and loss


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar (shape ()) tensor."""
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return record(out, (a,), lambda g: (np.full_like(a.data, g),), "sum")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over all rows of [n,d], returned as a length-d vector."""
    if a.data.ndim != 2:
        raise ValueError(f"mean_rows needs a 2-d tensor, got {a.shape}")
    n = a.shape[0]
    return record(
        a.data.mean(axis=0),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
        "mean_rows",
    )


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of [rows,classes] logits against int labels.

    Fused op: the backward rule is (softmax - onehot) / rows, which keeps the
    tape short and the loss numerically stable (log-sum-exp shifted by the
    row max).
    """
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy needs 2-d logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.intp)
    rows, classes = logits.shape
    if y.shape != (rows,):
        raise ValueError(f"labels shape {y.shape} does not match {rows} rows")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"label out of range for {classes} classes")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(rows), y]
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def rule(g):
        p = np.exp(logp)
        p[np.arange(rows), y] -= 1.0
        return (p * (g / rows),)

    return record(out, (logits,), rule, "softmax_cross_entropy")


def sigmoid_binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-class binary cross-entropy against multi-hot targets in [0,1],
    summed over classes and averaged over rows. Used for multi-label answer
    annotations; single-answer training uses softmax_cross_entropy."""
    if logits.data.ndim != 2:
        raise ValueError(f"sigmoid_binary_cross_entropy needs 2-d logits, got {logits.shape}")
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"targets shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    rows = z.shape[0]
    # softplus(z) - z*t, with softplus(z) = max(z,0) + log1p(exp(-|z|))
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(loss.sum() / rows, dtype=logits.dtype)

    def rule(g):
        return ((expit(z) - t) * (g / rows),)

    return record(out, (logits,), rule, "sigmoid_binary_cross_entropy")
