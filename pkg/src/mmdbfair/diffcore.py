"""Small reverse-mode autodiff over dense 2-D float64 arrays.

Every value is a :class:`Tensor` holding a 2-D array; scalars are 1x1.
Broadcasting is limited to row vectors, column vectors and 1x1 scalars, which
is all the objectives in this package need. Non-finite results raise
:class:`NonFiniteError` at the operation that produced them.
"""

import itertools
import math
from statistics import NormalDist

import numpy as np
from scipy.special import ndtr

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    pass


def _check(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


def _as2d(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"tensors are 2-D; got shape {arr.shape}")
    return arr


def _broadcast_shape(a, b, op):
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ValueError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(1, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "id")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = _check(_as2d(data), op)
        self.requires_grad = requires_grad
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_ids)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        count = self.data.size if axis is None else self.shape[axis]
        return tsum(self, axis) * (1.0 / count)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return mul(self, self)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _node(data, parents, backward_fn, op):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward_fn=backward_fn if needs else None, op=op)


# --------------------------------------------------------------------------
# tape


class Tape:
    """Operations reachable from one output, in topological order."""

    def __init__(self, output):
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))
        self.nodes = order
        self.output = output

    def __len__(self):
        return len(self.nodes)

    def leaves(self):
        return [n for n in self.nodes if not n.parents]

    def run_backward(self, seed):
        grads = {self.output.id: seed}
        for node in reversed(self.nodes):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check(pg, f"backward of {node.op}")
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg


def backward(output, grad=None):
    """Accumulate d(output)/d(leaf) into ``.grad`` of every trainable leaf."""
    if not output.requires_grad:
        return
    if grad is None:
        if output.data.size != 1:
            raise ValueError("backward() without a seed gradient needs a scalar output")
        grad = np.ones_like(output.data)
    Tape(output).run_backward(_as2d(grad))


# --------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def reciprocal(a):
    if np.any(a.data == 0.0):
        raise NonFiniteError("division by zero")
    r = 1.0 / a.data
    return _node(r, (a,), lambda g: (-g * r * r,), "reciprocal")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a):
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def tsum(a, axis=None):
    shape = a.shape
    if axis is None:
        out = a.data.sum().reshape(1, 1)
    else:
        out = a.data.sum(axis, keepdims=True)
    return _node(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log of non-positive value")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    if np.any(a.data < 0.0):
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def leaky_relu(a, slope=0.01):
    if not 0.0 < slope < 1.0:
        raise ValueError("leaky_relu slope must lie in (0, 1)")
    ad = a.data
    scale = np.where(ad > 0.0, 1.0, slope)
    return _node(ad * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def pairwise_sqdist(x, y):
    """D[i, j] = ||x_i - y_j||^2, differentiable in both arguments."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"pairwise_sqdist: feature dims differ ({x.shape[1]} vs {y.shape[1]})")
    xd, yd = x.data, y.data
    diff = xd[:, None, :] - yd[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def bw(g):
        gx = 2.0 * (g.sum(1, keepdims=True) * xd - g @ yd)
        gy = 2.0 * (g.sum(0)[:, None] * yd - g.T @ xd)
        return gx, gy

    return _node(out, (x, y), bw, "pairwise_sqdist")


def take_rows(a, index):
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), bw, "take_rows")


def submatrix(a, r0, r1, c0, c1):
    """a[r0:r1, c0:c1] as a new tensor."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[r0:r1, c0:c1] = g
        return (full,)

    return _node(a.data[r0:r1, c0:c1].copy(), (a,), bw, "submatrix")


def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, i, j):
    """The single entry a[i, j] as a 1x1 tensor."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[i, j] = g[0, 0]
        return (full,)

    return _node(a.data[i, j], (a,), bw, "take")


def concat_rows(tensors):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[0] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.vstack([t.data for t in tensors]), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=0)), "concat_rows")


def concat_cols(tensors):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[1] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.hstack([t.data for t in tensors]), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=1)), "concat_cols")


def max_of(scalars):
    """Hard maximum of 1x1 tensors; the gradient goes to the first argmax only."""
    scalars = [as_tensor(s) for s in scalars]
    if not scalars:
        raise ValueError("max_of needs at least one value")
    vals = [s.item() for s in scalars]
    k = int(np.argmax(vals))
    n = len(scalars)
    return _node(scalars[k].data.copy(), tuple(scalars),
                 lambda g: tuple(g if i == k else None for i in range(n)), "max_of")


def cross_entropy(logits, labels):
    """Mean negative log-softmax probability of the true class."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ValueError("cross_entropy: one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c})")
    z = logits.data - logits.data.max(1, keepdims=True)
    logsum = np.log(np.exp(z).sum(1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g[0, 0] * p / n,)

    return _node(loss, (logits,), bw, "cross_entropy")


def normal_cdf(a):
    ad = a.data
    out = ndtr(ad)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * ad * ad)
    return _node(out, (a,), lambda g: (g * pdf,), "normal_cdf")


_STD_NORMAL = NormalDist()


def normal_quantile(p):
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal_quantile needs p in (0, 1), got {p}")
    return _STD_NORMAL.inv_cdf(p)


def norm_cdf_value(x):
    return 0.5 * math.erfc(-float(x) / _SQRT2)


# --------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"step": self.step_count, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


class Adadelta:
    def __init__(self, params, lr=1.0, rho=0.9, eps=1e-6):
        self.params = list(params)
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.step_count = 0
        self.sq_avg = [np.zeros_like(p.data) for p in self.params]
        self.delta_avg = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        rho, eps = self.rho, self.eps
        for p, sq, acc in zip(self.params, self.sq_avg, self.delta_avg):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            sq *= rho
            sq += (1.0 - rho) * g * g
            delta = np.sqrt(acc + eps) / np.sqrt(sq + eps) * g
            acc *= rho
            acc += (1.0 - rho) * delta * delta
            p.data = p.data - self.lr * delta

    def state_dict(self):
        return {"step": self.step_count, "sq_avg": [a.copy() for a in self.sq_avg],
                "delta_avg": [a.copy() for a in self.delta_avg]}


def make_optimizer(name, params, lr):
    name = name.lower()
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "adadelta":
        return Adadelta(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r} (expected adam or adadelta)")


# --------------------------------------------------------------------------
# gradient checking


def numerical_grad(loss_fn, param, eps=1e-5):
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = loss_fn().item()
        flat[k] = orig - eps
        down = loss_fn().item()
        flat[k] = orig
        grad.reshape(-1)[k] = (up - down) / (2.0 * eps)
    return grad


def grad_check(loss_fn, params, eps=1e-5, floor=1e-8):
    """Normwise relative error between tape and central-difference gradients.

    The error is taken over all parameters stacked into one vector, so a
    parameter whose true gradient is zero (e.g. a bias that shifts every
    feature equally) does not turn roundoff into a large relative error.
    ``loss_fn`` takes no arguments and rebuilds the graph from the current
    parameter values each call.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.item()):
        raise NonFiniteError("loss is not finite")
    loss.backward()
    analytic, numeric = [], []
    for p in params:
        analytic.append((np.zeros_like(p.data) if p.grad is None else p.grad).ravel())
        numeric.append(numerical_grad(loss_fn, p, eps).ravel())
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor * max(1.0, abs(loss.item())))
    return float(np.linalg.norm(a - n) / scale)
