"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: the op set below is exactly what the segmentation model,
its losses, and the Fisher/penalty computations need. Graphs are built
eagerly as ops run, consumed by a single backward() call, and then released;
a second backward on the same graph raises. Broadcasting is restricted to
the case where the smaller operand's shape is a suffix of the larger one's
(plus scalars), which keeps the gradient reduction rule trivial.

Every op validates that its output is finite. log() is floored at LOG_EPS
so that downstream cross-entropy terms stay defined for saturated sigmoids.
"""

import numpy as np

LOG_EPS = 1e-12

_grad_enabled = True


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled():
    return _grad_enabled


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _suffix_broadcast_ok(small, big):
    # () broadcasts with anything; otherwise the smaller shape must be a
    # suffix of the larger one (no general numpy broadcasting).
    if small == ():
        return True
    if len(small) > len(big):
        return False
    return big[len(big) - len(small):] == small


def _unbroadcast(grad, shape):
    """Reduce grad (shaped like the op output) back to a parent's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_released")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor creation")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _op(data, parents, backward_fn, name):
        _check_finite(data, name)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._released = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    # -- elementwise arithmetic ---------------------------------------------

    @staticmethod
    def _coerce(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def _binary_shapes(self, other, op):
        a, b = self.shape, other.shape
        if a == b:
            return
        if _suffix_broadcast_ok(a, b) or _suffix_broadcast_ok(b, a):
            return
        raise ValueError(f"{op}: shapes {a} and {b} do not broadcast")

    def __add__(self, other):
        other = Tensor._coerce(other)
        self._binary_shapes(other, "add")

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor._op(self.data + other.data, (self, other), back, "add")

    __radd__ = __add__

    def __neg__(self):
        def back(g):
            return (-g,)

        return Tensor._op(-self.data, (self,), back, "neg")

    def __sub__(self, other):
        other = Tensor._coerce(other)
        self._binary_shapes(other, "sub")

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return Tensor._op(self.data - other.data, (self, other), back, "sub")

    def __rsub__(self, other):
        return Tensor._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = Tensor._coerce(other)
        self._binary_shapes(other, "mul")
        a, b = self.data, other.data

        def back(g):
            return _unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)

        return Tensor._op(a * b, (self, other), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        self._binary_shapes(other, "div")
        a, b = self.data, other.data

        def back(g):
            return (_unbroadcast(g / b, self.shape),
                    _unbroadcast(-g * a / (b * b), other.shape))

        return Tensor._op(a / b, (self, other), back, "div")

    def __rtruediv__(self, other):
        return Tensor._coerce(other).__truediv__(self)

    # -- matmul -------------------------------------------------------------

    def __matmul__(self, other):
        other = Tensor._coerce(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError("matmul expects 2-d operands")
        if self.shape[1] != other.shape[0]:
            raise ValueError(
                f"matmul: inner dims differ ({self.shape} @ {other.shape})")
        a, b = self.data, other.data

        def back(g):
            return g @ b.T, a.T @ g

        return Tensor._op(a @ b, (self, other), back, "matmul")

    def matmul(self, other):
        return self @ other

    # -- nonlinearities and pointwise functions -----------------------------

    def sigmoid(self):
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def back(g):
            return (g * out * (1.0 - out),)

        return Tensor._op(out, (self,), back, "sigmoid")

    def relu(self):
        x = self.data
        mask = x > 0

        def back(g):
            return (g * mask,)

        return Tensor._op(np.where(mask, x, 0.0), (self,), back, "relu")

    def log(self):
        x = np.maximum(self.data, LOG_EPS)

        def back(g):
            return (g / x,)

        return Tensor._op(np.log(x), (self,), back, "log")

    def sqrt(self):
        out = np.sqrt(self.data)

        def back(g):
            return (g / (2.0 * np.maximum(out, LOG_EPS)),)

        return Tensor._op(out, (self,), back, "sqrt")

    def square(self):
        x = self.data

        def back(g):
            return (2.0 * x * g,)

        return Tensor._op(x * x, (self,), back, "square")

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None):
        shape = self.shape
        if axis is None:
            def back(g):
                return (np.full(shape, float(g)),)

            return Tensor._op(np.asarray(self.data.sum()), (self,), back, "sum")
        ax = int(axis)

        def back(g):
            return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

        return Tensor._op(self.data.sum(axis=ax), (self,), back, "sum")

    def mean(self, axis=None):
        if axis is None:
            n = self.size
        else:
            n = self.shape[int(axis)]
        return self.sum(axis=axis) * (1.0 / n)

    # -- shape manipulation -------------------------------------------------

    def reshape(self, shape):
        old = self.shape

        def back(g):
            return (g.reshape(old),)

        return Tensor._op(self.data.reshape(shape), (self,), back, "reshape")

    def permute(self, axes):
        axes = tuple(axes)
        inv = np.argsort(axes)

        def back(g):
            return (g.transpose(inv),)

        return Tensor._op(self.data.transpose(axes), (self,), back, "permute")

    def transpose(self):
        if self.ndim != 2:
            raise ValueError("transpose expects a 2-d tensor")
        return self.permute((1, 0))

    def __getitem__(self, key):
        if not (isinstance(key, int) or isinstance(key, slice)):
            raise TypeError("only int or slice indexing on axis 0 is supported")
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            full[key] = g
            return (full,)

        return Tensor._op(self.data[key].copy(), (self,), back, "getitem")

    # -- backward -----------------------------------------------------------

    def backward(self):
        """Reverse-mode pass from a scalar. Accumulates into leaf .grad and
        releases the graph; re-running requires a fresh forward pass."""
        if self.size != 1:
            raise ValueError("backward() needs a scalar loss")
        if self._released:
            raise RuntimeError("graph already released by a previous backward()")
        if self._backward_fn is None:
            # constant or leaf loss: nothing upstream, all grads are zero
            return

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._backward_fn is not None and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones(self.shape)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad:
                    continue
                if parent._backward_fn is None:
                    if parent.grad is None:
                        parent.grad = np.zeros(parent.shape)
                    parent.grad += pg.reshape(parent.shape)
                else:
                    acc = grads.get(id(parent))
                    if acc is None:
                        grads[id(parent)] = np.array(pg, dtype=np.float64)
                    else:
                        acc += pg

        for node in topo:
            node._parents = ()
            node._backward_fn = None
            node._released = True


def concat(tensors, axis=0):
    """Concatenate along an existing axis; gradient splits back."""
    tensors = [Tensor._coerce(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    ax = int(axis)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=ax)
            for i in range(len(tensors)))

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._op(data, tuple(tensors), back, "concat")


def collect_grads(params):
    """Map of name -> gradient array for a dict of parameter tensors.

    Parameters that did not participate in the last backward pass get a
    zero gradient rather than an error.
    """
    out = {}
    for name, p in params.items():
        out[name] = np.zeros(p.shape) if p.grad is None else p.grad.copy()
    return out


def finite_diff_check(fn, params, h=1e-5):
    """Compare autodiff gradients of fn() against central finite differences.

    fn must rebuild the loss graph from `params` (a dict of name -> Tensor)
    on every call and return a scalar Tensor. Returns the maximum over all
    parameter elements of |autodiff - numeric| / (|autodiff| + 1e-8).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    probe = fn().item()
    if fn().item() != probe:
        raise ValueError("model function is not deterministic")

    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    grads = collect_grads(params)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                hi = fn().item()
            flat[i] = orig - h
            with no_grad():
                lo = fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            rel = abs(gflat[i] - numeric) / (abs(gflat[i]) + 1e-8)
            if rel > worst:
                worst = rel
    return worst
