"""Dense tensors with a reverse-mode gradient tape.

Operations (see :mod:`tamnas.ops`) always compute eagerly on numpy arrays.
When a :class:`Tape` is active and at least one input takes part in
differentiation, the op appends a node to the tape holding its inputs and a
closure mapping the output cotangent to input cotangents. Because nodes are
appended in execution order the tape is topologically sorted by
construction, so :meth:`Tape.backward` is a single reverse sweep.

Nothing is recorded outside a tape, which keeps inference passes cheap.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable

import numpy as np

from .errors import TamNasError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus the bookkeeping the tape needs.

    ``data`` is used as-is (no copy), so a Tensor may wrap a view into a
    larger parameter store.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = data
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._grad_fn: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # Operator sugar; the heavy lifting lives in ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr)


def make_node(out: np.ndarray, parents: Iterable[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed.

    ``grad_fn(g)`` must return one cotangent (or ``None``) per parent.
    """
    parents = tuple(parents)
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result._parents = parents
        result._grad_fn = grad_fn
        tape.nodes.append(result)
    return result


class Tape:
    """Append-only record of differentiable operations.

    Usage::

        with Tape(params) as tape:
            loss = model(x)
        grads = tape.backward(loss)

    ``params`` maps names to leaf tensors; they are marked as requiring
    gradients on entry. Additional tensors (inputs, intermediate activations)
    can be registered with :meth:`watch`.
    """

    def __init__(self, params: dict[str, Tensor] | None = None):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self._restore: list[Tensor] = []
        for name, t in (params or {}).items():
            self.watch(name, t)

    def watch(self, name: str, tensor: Tensor) -> Tensor:
        if not tensor.requires_grad:
            self._restore.append(tensor)
        tensor.requires_grad = True
        self.params[name] = tensor
        return tensor

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)
        return False

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Propagate from a scalar output to every registered tensor.

        Registered tensors unreachable from ``output`` receive zeros.
        """
        if seed is None:
            if output.data.size != 1:
                raise TamNasError(
                    f"backward needs a scalar output, got shape {output.shape}"
                )
            seed = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {id(output): seed}
        keep = {id(t) for t in self.params.values()}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None:
                continue
            if id(node) not in keep:
                del grads[id(node)]
            parent_grads = node._grad_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for name, t in self.params.items():
            g = grads.get(id(t))
            out[name] = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)
        # leaves go back to inference mode so later tapes skip them
        for t in self._restore:
            t.requires_grad = False
        self._restore.clear()
        return out


def backward(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    return tape.backward(output)
