"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery for the model in this package: elementwise ops,
broadcasting-aware arithmetic, batched matmul, batched 1-D (transposed)
convolution, and a differentiable Cholesky factorisation. Everything is
double precision; determinism follows from numpy's.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.linalg import solve_triangular

from .kernels import cholesky as _jittered_cholesky


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate gradients of a scalar (or seeded) output into leaves."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.value)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=float)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg
            elif node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g

    # Operator sugar.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return mul(self, power(as_tensor(other), -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))
    return list(reversed(order))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value + b.value,
        parents=(a, b),
        backward=lambda g: (
            (a, _unbroadcast(g, a.shape)),
            (b, _unbroadcast(g, b.shape)),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value * b.value,
        parents=(a, b),
        backward=lambda g: (
            (a, _unbroadcast(g * b.value, a.shape)),
            (b, _unbroadcast(g * a.value, b.shape)),
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.value**exponent
    return Tensor(
        out,
        parents=(a,),
        backward=lambda g: ((a, g * exponent * a.value ** (exponent - 1.0)),),
    )


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, parents=(a,), backward=lambda g: ((a, g * out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(
        np.log(a.value), parents=(a,), backward=lambda g: ((a, g / a.value),)
    )


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)  # numerically stable logistic
    return Tensor(out, parents=(a,), backward=lambda g: ((a, g * out * (1.0 - out)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0  # subgradient 0 at the kink
    return Tensor(a.value * mask, parents=(a,), backward=lambda g: ((a, g * mask),))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value <= b.value
    return Tensor(
        np.minimum(a.value, b.value),
        parents=(a, b),
        backward=lambda g: (
            (a, _unbroadcast(g * take_a, a.shape)),
            (b, _unbroadcast(g * ~take_a, b.shape)),
        ),
    )


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value >= b.value
    return Tensor(
        np.maximum(a.value, b.value),
        parents=(a, b),
        backward=lambda g: (
            (a, _unbroadcast(g * take_a, a.shape)),
            (b, _unbroadcast(g * ~take_a, b.shape)),
        ),
    )


def clip_by_value(a, threshold) -> Tensor:
    """Symmetric clipping with gradients to both the values and the threshold."""
    t = as_tensor(threshold)
    return maximum(minimum(as_tensor(a), t), -t)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return Tensor(out, parents=(a,), backward=backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(
        a.value.reshape(shape),
        parents=(a,),
        backward=lambda g: ((a, g.reshape(a.shape)),),
    )


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return Tensor(
        np.swapaxes(a.value, ax1, ax2),
        parents=(a,),
        backward=lambda g: ((a, np.swapaxes(g, ax1, ax2)),),
    )


def take(a, key) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros(a.shape)
        out[key] = g
        return ((a, out),)

    return Tensor(a.value[key], parents=(a,), backward=backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, pieces))

    return Tensor(
        np.concatenate([t.value for t in tensors], axis=axis),
        parents=tuple(tensors),
        backward=backward,
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        # Collapse broadcasted batch dimensions.
        ga = _unbroadcast(ga, a.shape) if ga.shape != a.shape else ga
        gb = _unbroadcast(gb, b.shape) if gb.shape != b.shape else gb
        return ((a, ga), (b, gb))

    return Tensor(a.value @ b.value, parents=(a, b), backward=backward)


# ---------------------------------------------------------------------------
# Batched 1-D convolution.
#
# Inputs are (batch, channels, length). Forward convolution uses
# cross-correlation semantics with symmetric zero padding (K - 1)/2, so for
# stride 1 the length is preserved and for stride s it becomes ceil(L / s).
# The transposed convolution is the exact adjoint of the strided forward map,
# taking length L to a caller-specified out_length with ceil(out_length/s) = L.
# ---------------------------------------------------------------------------


def _conv_geometry(kernel_size: int, stride: int, in_length: int):
    if kernel_size % 2 != 1:
        raise ValueError("kernel size must be odd")
    pad = (kernel_size - 1) // 2
    out_length = (in_length + 2 * pad - kernel_size) // stride + 1
    return pad, out_length


def _im2col(x: np.ndarray, kernel_size: int, stride: int) -> np.ndarray:
    """(B, C, Lpad) -> view (B, C, K, Lout) of sliding windows."""
    b, c, lp = x.shape
    lout = (lp - kernel_size) // stride + 1
    sb, sc, sl = x.strides
    return as_strided(
        x, shape=(b, c, kernel_size, lout), strides=(sb, sc, sl, sl * stride)
    )


def _conv_forward_raw(x, weight, stride):
    k = weight.shape[-1]
    pad, lout = _conv_geometry(k, stride, x.shape[-1])
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = _im2col(xp, k, stride).reshape(x.shape[0], -1, lout)
    return (weight.reshape(weight.shape[0], -1) @ cols), xp, cols


def _conv_backward_input_raw(gy, weight, stride, in_length):
    """Adjoint of the strided conv: scatter windows back into the input."""
    b = gy.shape[0]
    c, k = weight.shape[1], weight.shape[2]
    pad, lout = _conv_geometry(k, stride, in_length)
    if lout != gy.shape[-1]:
        raise ValueError(
            f"output length {gy.shape[-1]} incompatible with input length "
            f"{in_length} at stride {stride}"
        )
    # (O, C*K)^T @ (B, O, Lout) -> (B, C, K, Lout)
    gcols = (weight.reshape(weight.shape[0], -1).T @ gy).reshape(b, c, k, lout)
    gx = np.zeros((b, c, in_length + 2 * pad))
    for j in range(k):
        gx[:, :, j : j + stride * lout : stride] += gcols[:, :, j, :]
    return gx[:, :, pad : pad + in_length]


def conv1d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Batched 1-D cross-correlation; weight (out_ch, in_ch, K), odd K."""
    x, weight = as_tensor(x), as_tensor(weight)
    y, xp, cols = _conv_forward_raw(x.value, weight.value, stride)

    def backward(g):
        gw = np.einsum("bol,bkl->ok", g, cols).reshape(weight.shape)
        gx = _conv_backward_input_raw(g, weight.value, stride, x.shape[-1])
        return ((x, gx), (weight, gw))

    out = Tensor(y, parents=(x, weight), backward=backward)
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (1, -1, 1)))
    return out


def conv1d_transpose(x, weight, bias=None, stride: int = 1, out_length=None) -> Tensor:
    """Adjoint of `conv1d`; weight (in_ch, out_ch, K) maps in_ch to out_ch.

    out_length defaults to stride * L and must satisfy
    ceil(out_length / stride) = L.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if out_length is None:
        out_length = stride * x.shape[-1]
    y = _conv_backward_input_raw(x.value, weight.value, stride, out_length)

    def backward(g):
        gx, _, cols = _conv_forward_raw(g, weight.value, stride)
        gw = np.einsum("bol,bkl->ok", x.value, cols).reshape(weight.shape)
        return ((x, gx), (weight, gw))

    out = Tensor(y, parents=(x, weight), backward=backward)
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (1, -1, 1)))
    return out


def cholesky_op(a) -> Tensor:
    """Differentiable lower Cholesky factor (with the package jitter policy).

    Backward uses the standard triangular-solve formulation: with
    P = Phi(L^T Lbar) where Phi keeps the lower triangle and halves the
    diagonal, the input gradient is the symmetrisation of L^-T P L^-1.
    """
    a = as_tensor(a)
    ell = _jittered_cholesky(a.value)

    def backward(g):
        p = np.tril(ell.T @ g)
        p[np.diag_indices_from(p)] *= 0.5
        # Solve L^T X = P, then (L^T Y^T = X^T)^T  => Y = L^-T P L^-1.
        x1 = solve_triangular(ell, p, lower=True, trans="T")
        y = solve_triangular(ell, x1.T, lower=True, trans="T").T
        ga = 0.5 * (y + y.T)
        return ((a, ga),)

    return Tensor(ell, parents=(a,), backward=backward)


def grad_check(closure, params: dict, h: float = 1e-5, subsample: int = 10_000,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between reverse-mode and central finite differences.

    `closure` maps nothing to a scalar Tensor built from `params` (a dict of
    name -> Tensor leaves). Parameters with more than `subsample` coordinates
    are checked on a random 1% subsample.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = closure()
    loss.backward()
    analytic = {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        n = flat.size
        if n > subsample:
            idx = rng.choice(n, size=max(1, n // 100), replace=False)
        else:
            idx = np.arange(n)
        ga = analytic[name].reshape(-1)
        scale = max(1.0, np.abs(ga).max()) if ga.size else 1.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(closure().value)
            flat[i] = orig - h
            fm = float(closure().value)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(fd - ga[i]) / max(scale, abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
