"""Append-only scalar tape with reverse-mode differentiation.

Every scalar is a node in flat arrays (see ``_kernels_py`` for the layout).
Gradients can be computed numerically (:meth:`Tape.backward`) or emitted
as new differentiable nodes (:meth:`Tape.gradient_nodes`), which is what
makes differentiating through an inner gradient step possible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..errors import ConfigError, StateError
from . import _ops
from ._backend import kernels
from ._kernels_py import apply_op

_ACTIVATIONS = {"tanh": _ops.TANH, "relu": _ops.RELU, "sigmoid": _ops.SIGMOID, None: _ops.NO_ACT}


@dataclass(frozen=True)
class InnerStep:
    """Record of ``params - rate * grad`` emitted on the tape."""

    lo: int  # first node of the gradient region
    hi: int  # one past the last node of the gradient region
    detached: bool


class Tape:
    def __init__(self, capacity: int = 1024, kernel_module=None):
        self.k = kernel_module or kernels
        cap = max(int(capacity), 16)
        self.op = np.zeros(cap, dtype=np.int8)
        self.val = np.zeros(cap, dtype=np.float64)
        self.grad = np.zeros(cap, dtype=np.float64)
        self.need = np.zeros(cap, dtype=np.uint8)
        self.stop = np.zeros(cap, dtype=np.uint8)
        self.slot = np.full(cap, -1, dtype=np.int64)
        self.pstart = np.zeros(cap + 1, dtype=np.int64)
        self.par = np.zeros(4 * cap, dtype=np.int64)
        self.n = 0
        self.npar = 0
        self.leaf_ids: list[int] = []
        self._bound: list[bool] = []
        self._valid = 0
        self._steps: list[InnerStep] = []
        self._grad_span: tuple[int, int] | None = None

    # -- storage -----------------------------------------------------------

    def __len__(self) -> int:
        return self.n

    def _reserve(self, nodes: int, parents: int) -> None:
        need_n = self.n + nodes
        if need_n > self.op.shape[0]:
            cap = max(need_n, 2 * self.op.shape[0])
            for name in ("op", "val", "grad", "need", "stop"):
                old = getattr(self, name)
                new = np.zeros(cap, dtype=old.dtype)
                new[: self.n] = old[: self.n]
                setattr(self, name, new)
            slot = np.full(cap, -1, dtype=np.int64)
            slot[: self.n] = self.slot[: self.n]
            self.slot = slot
            ps = np.zeros(cap + 1, dtype=np.int64)
            ps[: self.n + 1] = self.pstart[: self.n + 1]
            self.pstart = ps
        need_p = self.npar + parents
        if need_p > self.par.shape[0]:
            cap = max(need_p, 2 * self.par.shape[0])
            new = np.zeros(cap, dtype=np.int64)
            new[: self.npar] = self.par[: self.npar]
            self.par = new

    def _advance(self, n: int, npar: int) -> None:
        old = self.n
        self.n, self.npar = int(n), int(npar)
        if self._valid == old:
            self._valid = self.n

    def checkpoint(self) -> int:
        return self.n

    def truncate(self, position: int) -> None:
        """Drop every node at index >= ``position``."""
        if not 0 <= position <= self.n:
            raise ConfigError(f"checkpoint {position} outside tape of length {self.n}")
        self.n = position
        self.npar = int(self.pstart[position])
        self.slot[position:] = -1
        self.stop[position:] = 0
        keep = [i for i, node in enumerate(self.leaf_ids) if node < position]
        self.leaf_ids = [self.leaf_ids[i] for i in keep]
        self._bound = [self._bound[i] for i in keep]
        self._steps = [s for s in self._steps if s.hi <= position]
        self._valid = min(self._valid, position)
        self._grad_span = None

    # -- node construction -------------------------------------------------

    def push(self, op: int, parents: Sequence[int] = (), value: float | None = None) -> int:
        parents = [int(p) for p in parents]
        for p in parents:
            if not 0 <= p < self.n:
                raise ConfigError(f"parent {p} is not on this tape")
        self._reserve(1, len(parents))
        i = self.n
        if value is None:
            value = apply_op(op, [float(self.val[p]) for p in parents])
        self.op[i] = op
        self.val[i] = value
        self.need[i] = 1 if op == _ops.LEAF else int(any(self.need[p] for p in parents))
        self.pstart[i + 1] = self.npar + len(parents)
        self.par[self.npar : self.npar + len(parents)] = parents
        self._advance(i + 1, self.npar + len(parents))
        return i

    def const(self, value: float) -> "Node":
        return Node(self, self.push(_ops.CONST, (), float(value)))

    def leaf(self, value: float | None = None) -> "Node":
        return Node(self, self.add_leaves(None if value is None else [value], count=1)[0])

    def add_leaves(self, values: Iterable[float] | None, count: int | None = None) -> np.ndarray:
        """Bulk-create leaves; ``values=None`` leaves them unbound."""
        if values is None:
            m = int(count or 0)
            arr = np.full(m, np.nan)
        else:
            arr = np.asarray(values, dtype=np.float64).ravel()
            m = arr.shape[0]
        self._reserve(m, 0)
        lo = self.n
        ids = np.arange(lo, lo + m, dtype=np.int64)
        self.op[lo : lo + m] = _ops.LEAF
        self.val[lo : lo + m] = arr
        self.need[lo : lo + m] = 1
        self.slot[lo : lo + m] = np.arange(len(self.leaf_ids), len(self.leaf_ids) + m)
        self.pstart[lo + 1 : lo + m + 1] = self.npar
        self.leaf_ids.extend(ids.tolist())
        self._bound.extend([values is not None] * m)
        if values is None:
            # everything from here on is unknown until forward() binds values
            self.n = lo + m
        else:
            self._advance(lo + m, self.npar)
        return ids

    def add_consts(self, values) -> np.ndarray:
        """Bulk-create constants; returns ids shaped like ``values``."""
        arr = np.asarray(values, dtype=np.float64)
        flat = arr.ravel()
        m = flat.shape[0]
        self._reserve(m, 0)
        lo = self.n
        self.op[lo : lo + m] = _ops.CONST
        self.val[lo : lo + m] = flat
        self.need[lo : lo + m] = 0
        self.pstart[lo + 1 : lo + m + 1] = self.npar
        self._advance(lo + m, self.npar)
        return np.arange(lo, lo + m, dtype=np.int64).reshape(arr.shape)

    def push_binary(self, op: int, a, b) -> np.ndarray:
        """Vectorised emission of elementwise ADD/SUB/MUL nodes."""
        a = np.asarray(a, dtype=np.int64).ravel()
        b = np.asarray(b, dtype=np.int64).ravel()
        m = a.shape[0]
        self._reserve(m, 2 * m)
        lo, plo = self.n, self.npar
        va, vb = self.val[a], self.val[b]
        if op == _ops.MUL:
            v = va * vb
        elif op == _ops.SUB:
            v = va - vb
        elif op == _ops.ADD:
            v = (0.0 + va) + vb
        else:
            raise ConfigError(f"push_binary does not support op {_ops.NAMES.get(op, op)}")
        self.op[lo : lo + m] = op
        self.val[lo : lo + m] = v
        self.need[lo : lo + m] = self.need[a] | self.need[b]
        self.pstart[lo + 1 : lo + m + 1] = plo + 2 * np.arange(1, m + 1)
        pairs = self.par[plo : plo + 2 * m].reshape(m, 2)
        pairs[:, 0] = a
        pairs[:, 1] = b
        self._advance(lo + m, plo + 2 * m)
        return np.arange(lo, lo + m, dtype=np.int64)

    def dense(self, inputs, weights, bias, one: int, activation: str | None) -> np.ndarray:
        """Emit ``activation(inputs @ weights.T + bias)`` node by node."""
        inputs = np.ascontiguousarray(inputs, dtype=np.int64)
        weights = np.ascontiguousarray(weights, dtype=np.int64)
        bias = np.ascontiguousarray(bias, dtype=np.int64)
        rows, fan_in = inputs.shape
        fan_out = weights.shape[0]
        if weights.shape[1] != fan_in or bias.shape[0] != fan_out:
            raise ConfigError("dense layer shape mismatch")
        units = rows * fan_out
        self._reserve(2 * units, units * (2 * fan_in + 3))
        out = np.empty((rows, fan_out), dtype=np.int64)
        n, npar = self.k.emit_dense(
            self.op, self.val, self.need, self.pstart, self.par, self.n, self.npar,
            inputs, weights, bias, int(one), _ACTIVATIONS[activation], out,
        )
        self._advance(n, npar)
        return out

    def bce(self, logits, labels, one: int) -> int:
        """Emit mean binary cross-entropy of ``sigmoid(logits)``; returns the root id."""
        logits = np.ascontiguousarray(logits, dtype=np.int64)
        labels = np.ascontiguousarray(labels, dtype=np.float64)
        m = logits.shape[0]
        if m == 0:
            raise ConfigError("empty batch")
        self._reserve(4 * m + 3, 5 * m + 2)
        n, npar, root = self.k.emit_bce(
            self.op, self.val, self.need, self.pstart, self.par, self.n, self.npar,
            logits, labels, int(one),
        )
        self._advance(n, npar)
        return int(root)

    def node(self, index: int) -> "Node":
        return Node(self, int(index))

    @property
    def leaves(self) -> list["Node"]:
        return [Node(self, i) for i in self.leaf_ids]

    # -- evaluation --------------------------------------------------------

    def forward(self, leaf_values=None) -> None:
        """Bind leaf values (in leaf creation order) and replay the whole tape."""
        if leaf_values is not None:
            vals = np.asarray(leaf_values, dtype=np.float64).ravel()
            if vals.shape[0] != len(self.leaf_ids):
                raise ConfigError(
                    f"expected {len(self.leaf_ids)} leaf values, got {vals.shape[0]}"
                )
            self._bound = [True] * len(self.leaf_ids)
        else:
            if not all(self._bound):
                missing = self._bound.index(False)
                raise ConfigError(f"leaf {missing} is unbound")
            vals = self.val[np.asarray(self.leaf_ids, dtype=np.int64)].copy()
        if vals.shape[0] == 0:
            vals = np.zeros(1)
        self.k.replay(self.op, self.val, self.pstart, self.par, self.slot, vals, 0, self.n)
        self._valid = self.n
        self._grad_span = None

    def _check_forwarded(self, root: int) -> None:
        if not 0 <= root < self.n:
            raise ConfigError(f"node {root} is not on this tape")
        if root >= self._valid:
            raise StateError("backward requested before forward pass bound all leaves")

    def backward(self, root: int, wrt=None, first_order: bool = False) -> np.ndarray:
        """Numeric gradient of node ``root`` with respect to ``wrt`` (default: all leaves)."""
        root = int(root)
        self._check_forwarded(root)
        ids = np.asarray(self.leaf_ids if wrt is None else wrt, dtype=np.int64).ravel()
        if ids.shape[0] == 0:
            return np.zeros(0)
        floor = int(min(ids.min(), root))
        self.k.sweep(
            self.op, self.val, self.need, self.stop, self.pstart, self.par, self.grad,
            root, floor, bool(first_order),
        )
        self._grad_span = (floor, root)
        out = np.where(ids <= root, self.grad[np.minimum(ids, root)], 0.0)
        # ids below floor cannot occur; ids above root are unreachable
        return out

    def gradient_nodes(self, root: int, wrt) -> np.ndarray:
        """Emit differentiable nodes holding d(root)/d(wrt); returns their ids."""
        root = int(root)
        self._check_forwarded(root)
        ids = np.asarray(wrt, dtype=np.int64).ravel()
        floor = int(min(ids.min(), root))
        edges = int(self.pstart[root + 1] - self.pstart[floor])
        span = root + 1 - floor
        self._reserve(span + 3 * edges + 4, 7 * edges + 4)
        terminal = np.zeros(root + 1, dtype=np.uint8)
        terminal[ids[ids <= root]] = 1
        n, npar, adj = self.k.emit_adjoint(
            self.op, self.val, self.need, self.pstart, self.par, self.n, self.npar,
            root, floor, terminal,
        )
        self._advance(n, npar)
        out = np.where(ids <= root, adj[np.minimum(ids, root)], -1)
        if (out < 0).any():
            zero = self.push(_ops.CONST, (), 0.0)
            out = np.where(out < 0, zero, out)
        return out.astype(np.int64)

    def inner_step(self, loss: int, params, rate: float, detached: bool = False) -> np.ndarray:
        """Emit ``params - rate * d(loss)/d(params)``; returns the new parameter ids.

        With ``detached=True`` the gradient enters as constants, so only the
        first-order meta-gradient is available through the result.
        """
        params = np.asarray(params, dtype=np.int64).ravel()
        lo = self.n
        if detached:
            g = self.backward(loss, wrt=params)
            step = self.add_consts(rate * g)
        else:
            g_ids = self.gradient_nodes(loss, params)
            rate_id = self.push(_ops.CONST, (), float(rate))
            step = self.push_binary(_ops.MUL, np.full(params.shape, rate_id), g_ids)
        hi = self.n
        self.stop[lo:hi] = 1
        self._steps.append(InnerStep(lo, hi, detached))
        return self.push_binary(_ops.SUB, params, step)

    def steps_before(self, root: int) -> list[InnerStep]:
        return [s for s in self._steps if s.lo <= root]


class Node:
    """Handle on one scalar of a :class:`Tape`."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = int(index)

    def __repr__(self) -> str:
        return f"Node({self.op}, value={self.value!r}, index={self.index})"

    def __index__(self) -> int:
        return self.index

    @property
    def value(self) -> float:
        return float(self.tape.val[self.index])

    @property
    def op(self) -> str:
        return _ops.NAMES[int(self.tape.op[self.index])]

    @property
    def parents(self) -> tuple["Node", ...]:
        t = self.tape
        a, b = t.pstart[self.index], t.pstart[self.index + 1]
        return tuple(Node(t, p) for p in t.par[a:b])

    @property
    def grad(self) -> float:
        span = self.tape._grad_span
        if span is None or not span[0] <= self.index <= span[1]:
            return 0.0
        return float(self.tape.grad[self.index])

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise ConfigError("nodes belong to different tapes")
            return other
        return self.tape.const(float(other))

    def _bin(self, op: int, a, b) -> "Node":
        return Node(self.tape, self.tape.push(op, (a.index, b.index)))

    def __add__(self, other):
        return self._bin(_ops.ADD, self, self._lift(other))

    def __radd__(self, other):
        return self._bin(_ops.ADD, self._lift(other), self)

    def __sub__(self, other):
        return self._bin(_ops.SUB, self, self._lift(other))

    def __rsub__(self, other):
        return self._bin(_ops.SUB, self._lift(other), self)

    def __mul__(self, other):
        return self._bin(_ops.MUL, self, self._lift(other))

    def __rmul__(self, other):
        return self._bin(_ops.MUL, self._lift(other), self)

    def __truediv__(self, other):
        return self._bin(_ops.DIV, self, self._lift(other))

    def __rtruediv__(self, other):
        return self._bin(_ops.DIV, self._lift(other), self)

    def __neg__(self):
        return Node(self.tape, self.tape.push(_ops.NEG, (self.index,)))

    def _unary(self, op: int) -> "Node":
        return Node(self.tape, self.tape.push(op, (self.index,)))

    def sigmoid(self):
        return self._unary(_ops.SIGMOID)

    def tanh(self):
        return self._unary(_ops.TANH)

    def relu(self):
        return self._unary(_ops.RELU)

    def log(self):
        return self._unary(_ops.LOG)


def sigmoid(x: Node) -> Node:
    return x.sigmoid()


def tanh(x: Node) -> Node:
    return x.tanh()


def relu(x: Node) -> Node:
    return x.relu()


def log(x: Node) -> Node:
    return x.log()


def add(*terms: Node) -> Node:
    tape = terms[0].tape
    return Node(tape, tape.push(_ops.ADD, [t.index for t in terms]))


def dot(xs: Sequence[Node], ys: Sequence[Node]) -> Node:
    """Single ``sum(x * y)`` node (one matmul element)."""
    if len(xs) != len(ys):
        raise ConfigError("dot operands differ in length")
    tape = xs[0].tape
    parents = []
    for x, y in zip(xs, ys):
        parents.extend((x.index, y.index))
    return Node(tape, tape.push(_ops.DOT, parents))
