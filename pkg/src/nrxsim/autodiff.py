"""Reverse-mode automatic differentiation over dense real numpy tensors.

This is the numerical core that the neural receiver is trained with. It is
deliberately small: the op set (elementwise arithmetic, 2-D matmul,
same-padding convolution, ReLU, channel concatenation, reductions, slicing)
is exactly what the receiver network needs, plus the two training losses and
an Adam optimizer. Complex quantities never enter this module; callers carry
them as paired real channels.

Gradients are tracked per result tensor: every op that sees a
``requires_grad`` input records its parents and a backward closure, and
``backward()`` replays the recording once in reverse topological order.
A recording can be backpropagated exactly once.

Default precision is float32; passing float64 arrays through the same ops
yields a float64 graph, which is what the finite-difference tests use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

# When enabled, every op validates that its output is finite. Slow; meant
# for tests and debugging of diverging training runs.
CHECK_FINITE = False

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense real tensor with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None
        self._done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else None))


def _result(data: np.ndarray, parents, grad_fn) -> Tensor:
    """Wrap an op result, recording parents only when gradients are needed."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._done = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), grad_fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def grad_fn(g):
        return (g * (data > 0),)

    return _result(data, (a,), grad_fn)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        g = np.moveaxis(g, axis, 0)
        parts = [np.moveaxis(g[offsets[i]:offsets[i + 1]], 0, axis) for i in range(len(sizes))]
        return tuple(parts)

    return _result(data, tuple(tensors), grad_fn)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old_shape = a.data.shape
    data = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(old_shape),)

    return _result(data, (a,), grad_fn)


def tensor_slice(a, key) -> Tensor:
    """Basic slicing plus integer-array gather along the leading axis."""
    a = _as_tensor(a)
    data = a.data[key]
    old_shape = a.data.shape
    fancy = isinstance(key, np.ndarray) and key.dtype.kind in "iu"

    def grad_fn(g):
        full = np.zeros(old_shape, dtype=g.dtype)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _result(data, (a,), grad_fn)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(a.dtype, copy=False),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, in_shape).astype(a.dtype, copy=False),)

    return _result(data, (a,), grad_fn)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def sum_others(a, axis: int) -> Tensor:
    """For each index u along `axis`, the sum of all other slices.

    This is the message aggregation of the receiver's graph layer. The
    reduction runs in float64 and is cast back afterwards, which makes the
    result independent of the slice ordering (bit-exact user permutation
    equivariance); the sum over a single slice is exactly zero.
    """
    a = _as_tensor(a)
    acc = a.data.astype(np.float64, copy=False)
    total = acc.sum(axis=axis, keepdims=True)
    data = (total - acc).astype(a.dtype, copy=False)

    def grad_fn(g):
        g64 = g.astype(np.float64, copy=False)
        g_total = g64.sum(axis=axis, keepdims=True)
        return ((g_total - g64).astype(a.dtype, copy=False),)

    return _result(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# same-padding 2-D convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-pad (same) and unfold (N, H, W, C) into (N*H*W, kh*kw*C).

    Column order is (kh, kw, C): the channel axis is contiguous in memory,
    which keeps the unavoidable gather copy cache-friendly.
    """
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return view.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * c)


def _conv_raw(x: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None):
    n, h, wd, _ = x.shape
    kh, kw, ci, co = w.shape
    if cols is None:
        cols = _im2col(x, kh, kw)
    y = cols @ w.reshape(kh * kw * ci, co)
    return y.reshape(n, h, wd, co), cols


def conv2d(x, w) -> Tensor:
    """2-D convolution, stride 1, zero 'same' padding, NHWC layout.

    x: (N, H, W, Cin), w: (kh, kw, Cin, Cout) with odd kernel sizes.
    """
    x = _as_tensor(x)
    w = _as_tensor(w, like=x)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects NHWC input and (kh,kw,Cin,Cout) kernel, got {x.data.shape} and {w.data.shape}")
    kh, kw, ci, co = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d requires odd kernel sizes, got ({kh},{kw})")
    if x.data.shape[-1] != ci:
        raise ValueError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}")

    record = x.requires_grad or w.requires_grad
    data, cols = _conv_raw(x.data, w.data, None)
    saved_cols = cols if record else None

    def grad_fn(g):
        gm = g.reshape(-1, co)
        grad_w = (saved_cols.T @ gm).reshape(kh, kw, ci, co)
        w_flip = w.data[::-1, ::-1].transpose(0, 1, 3, 2)
        grad_x, _ = _conv_raw(g, np.ascontiguousarray(w_flip))
        return grad_x, grad_w

    return _result(data, (x, w), grad_fn)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def bce_with_logits(logits, bits, mask=None) -> Tensor:
    """Mean binary cross-entropy between logits and {0,1} bit labels.

    Computed as ln(1 + exp(-(2 b - 1) z)) with the overflow-free split.
    `mask`, when given, weights elements and the mean runs over the mask sum;
    masked-out positions receive exactly zero gradient.
    """
    logits = _as_tensor(logits)
    b = bits.data if isinstance(bits, Tensor) else np.asarray(bits)
    if b.shape != logits.data.shape:
        raise ValueError(f"bce_with_logits shape mismatch: logits {logits.data.shape} vs bits {b.shape}")
    if not np.all((b == 0) | (b == 1)):
        raise ValueError("bce_with_logits: bit labels must be 0 or 1")
    b = b.astype(logits.dtype, copy=False)
    z = logits.data
    a = -(2.0 * b - 1.0) * z
    per_elem = np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))
    if mask is None:
        denom = float(per_elem.size)
        data = per_elem.sum() / denom
        m = None
    else:
        m = (mask.data if isinstance(mask, Tensor) else np.asarray(mask)).astype(logits.dtype, copy=False)
        denom = float(m.sum())
        if denom <= 0:
            raise ValueError("bce_with_logits: mask selects no elements")
        data = (per_elem * m).sum() / denom

    def grad_fn(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        gz = (sig - b) / denom
        if m is not None:
            gz = gz * m
        return ((g * gz).astype(logits.dtype, copy=False),)

    return _result(np.asarray(data, dtype=logits.dtype), (logits,), grad_fn)


def mse(a, b, mask=None) -> Tensor:
    """Mean squared difference over all real components."""
    a = _as_tensor(a)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b)
    if bd.shape != a.data.shape:
        raise ValueError(f"mse shape mismatch: {a.data.shape} vs {bd.shape}")
    diff = a.data - bd.astype(a.dtype, copy=False)
    if mask is None:
        denom = float(diff.size)
        data = np.square(diff).sum() / denom
        m = None
    else:
        m = (mask.data if isinstance(mask, Tensor) else np.asarray(mask)).astype(a.dtype, copy=False)
        denom = float(m.sum())
        if denom <= 0:
            raise ValueError("mse: mask selects no elements")
        data = (np.square(diff) * m).sum() / denom

    def grad_fn(g):
        gd = 2.0 * diff / denom
        if m is not None:
            gd = gd * m
        return ((g * gd).astype(a.dtype, copy=False),)

    return _result(np.asarray(data, dtype=a.dtype), (a,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating into leaf ``.grad``.

    The recorded graph can be walked once; a second call raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward called on a tensor with no recorded graph")
    if loss._done:
        raise RuntimeError("backward already ran for this recording")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            topo.append(node)
            continue
        if node._done and node._parents:
            raise RuntimeError("backward already ran for part of this recording")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is not None:
            parent_grads = node._grad_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] += pg
                else:
                    grads[id(p)] = pg
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._parents:  # leaves stay reusable across recordings
            node._done = True
            node._grad_fn = None


# ---------------------------------------------------------------------------
# optimizer and initialization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments and hyperparameters for a named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads, state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    `params` maps names to Tensors; `grads` maps names to arrays (pass None
    to consume each parameter's accumulated ``.grad``). Non-finite gradients
    raise, naming the parameter.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise ValueError(f"missing gradient for parameter '{name}'")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.epsilon)


def glorot_uniform(rng: np.random.Generator, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Seeded uniform init in +-sqrt(6/(fan_in+fan_out)).

    Dense kernels are (fan_in, fan_out); conv kernels (kh, kw, Cin, Cout)
    use receptive-field fans.
    """
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        kh, kw, ci, co = shape
        fan_in, fan_out = kh * kw * ci, kh * kw * co
    else:
        fan_in = fan_out = int(np.prod(shape))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
