"""Reverse-mode autodiff tape over dense numpy arrays.

A ``Tensor`` wraps a float32/float64 ndarray. Operations from
:mod:`mvrender.diffcore.ops` record a vector-Jacobian-product closure on
each result; ``backward()`` walks the recorded graph in reverse
topological order and accumulates gradients into leaf tensors.

The primitive set is closed: everything differentiable in this package
is built from the ops defined in ``ops.py``, each of which is certified
against the finite-difference oracle in ``gradcheck.py``.
"""
from __future__ import annotations

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes incompatible for the attempted operation."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient stopped being finite."""


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32)
    return arr


class Tensor:
    """Dense array node on the autodiff tape.

    ``_parents`` holds the input tensors and ``_vjp`` maps the incoming
    gradient to one gradient array (or None) per parent. Leaf tensors
    with ``requires_grad`` accumulate into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- construction used by ops ------------------------------------

    @classmethod
    def _from_op(cls, data, parents, vjp):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    # -- basic introspection ------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        kind = "Parameter" if isinstance(self, Parameter) else "Tensor"
        return f"{kind}(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- operator sugar (implemented in ops.py, bound there) ----------
    # __add__ etc. are attached at the bottom of ops.py to avoid a
    # circular import.

    # -- backward ------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be scalar. Repeated calls accumulate additively.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            return

        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: accumulate
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += np.asarray(g).reshape(node.data.shape)
                continue
            parent_grads = node._vjp(np.asarray(g))
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                # rebind rather than mutate: numpy returns immutable
                # scalars for 0-d operands, and vjp outputs may alias
                # forward buffers
                grads[id(parent)] = pg if acc is None else acc + pg

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        """Constant copy sharing the same buffer, cut from the tape."""
        return Tensor(self.data, requires_grad=False)


class Parameter(Tensor):
    """Named learnable leaf. Gradient starts out zeroed."""

    __slots__ = ("name",)

    def __init__(self, value, name, dtype=None):
        super().__init__(value, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)


def _topo_order(root):
    """Reverse topological order via iterative DFS (cycle-free tape)."""
    seen = set()
    order = []
    stack = [(root, False)]
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
    order.reverse()
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def check_finite(t, context=""):
    """Raise NonFiniteError when the tensor carries NaN/Inf."""
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values{' in ' + context if context else ''}")
    return t


class ParamStore:
    """Registry of uniquely named Parameters for one model."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(np.asarray(value, dtype=self.dtype), name)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()

    def num_scalars(self):
        return sum(p.data.size for p in self._params.values())

    def state_arrays(self):
        """name -> ndarray copy of current values (insertion order)."""
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state(self, arrays):
        for k, p in self._params.items():
            src = arrays[k]
            if src.shape != p.data.shape:
                raise ShapeError(f"parameter {k}: checkpoint shape {src.shape} "
                                 f"!= model shape {p.data.shape}")
            p.data = np.ascontiguousarray(src, dtype=p.data.dtype)
