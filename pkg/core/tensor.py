"""Dense tensors with reverse-mode differentiation.

A `Tensor` wraps a numpy array. Operations are `Function` subclasses; applying
one records the parents so `Tensor.backward` can walk the graph in reverse
topological order. Saved buffers are released after backward, so a graph can
only be differentiated once.
"""
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.errors import NumericError, UsageError

_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block (evaluation, probes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


def check_finite(array, where):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{where} produced non-finite values")


def _as_float_array(data):
    array = np.asarray(data)
    if array.dtype not in (np.float32, np.float64):
        array = array.astype(np.float32)
    return array


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    def __init__(self, data, requires_grad=False, _ctx=None):
        self.data = _as_float_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._ctx = _ctx

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from core import ops
        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.shift(self, float(other))

    def __radd__(self, other):
        # lets sum() start from 0
        return self.__add__(other)

    def __mul__(self, other):
        from core import ops
        if isinstance(other, Tensor):
            raise UsageError("use ops.elementwise_mul for tensor products")
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's `grad`."""
        if self._ctx is None:
            raise UsageError("backward() needs a tensor produced under gradient tracking")
        if self._ctx.released:
            raise UsageError("backward() already ran over this graph; run forward again")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("grad must be given for a non-scalar tensor")
            grad = np.ones_like(self.data)

        order = self._topological_order()
        pending = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            ctx = node._ctx
            if ctx is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g.astype(node.data.dtype, copy=False)
                continue
            if ctx.released:
                raise UsageError("part of this graph was already differentiated; run forward again")
            parent_grads = ctx.backward(g)
            for parent, parent_grad in zip(ctx.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                check_finite(parent_grad, f"{type(ctx).__name__}.backward")
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad
            ctx.release()

    def _topological_order(self):
        # iterative DFS, deep ResNets overflow the recursion limit
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return order


@dataclass(frozen=True)
class InitSpec:
    scheme: str
    stream: str
    fan_in: int = 0


class Parameter(Tensor):
    """A named leaf tensor that always tracks gradients."""

    def __init__(self, data, name, init_spec: Optional[InitSpec] = None):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.init_spec = init_spec
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Function:
    """One differentiable operation; subclasses implement forward/backward on arrays."""

    def __init__(self):
        self.parents = ()
        self.released = False

    @classmethod
    def apply(cls, *parents, **kwargs):
        fn = cls()
        out = fn.forward(*[p.data for p in parents], **kwargs)
        check_finite(out, cls.__name__)
        track = _grad_enabled and any(p.requires_grad for p in parents)
        if not track:
            return Tensor(out)
        fn.parents = parents
        return Tensor(out, requires_grad=True, _ctx=fn)

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        """Return one gradient (or None) per parent."""
        raise NotImplementedError

    def release(self):
        self.__dict__ = {"parents": self.parents, "released": True}
