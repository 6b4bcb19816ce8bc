"""Scalar-graph reverse-mode automatic differentiation.

Exposes the :class:`Tape`/:class:`Node` graph plus three entry points:

* :func:`forward_scalar` binds leaf values and evaluates a graph,
* :func:`backward` returns d(root)/d(leaf) for every leaf,
* :func:`grad_of_grad` differentiates a loss that was evaluated after an
  inner gradient step recorded with :meth:`Tape.inner_step`.
"""

from __future__ import annotations

import numpy as np

from ..errors import StateError
from ._backend import BACKEND, available_backends
from .tape import InnerStep, Node, Tape, add, dot, log, relu, sigmoid, tanh

__all__ = [
    "BACKEND",
    "InnerStep",
    "Node",
    "Tape",
    "add",
    "available_backends",
    "backward",
    "dot",
    "forward_scalar",
    "grad_of_grad",
    "log",
    "relu",
    "sigmoid",
    "tanh",
]


def forward_scalar(graph: Node, leaf_values=None) -> float:
    """Evaluate ``graph`` after binding ``leaf_values`` (leaf creation order)."""
    graph.tape.forward(leaf_values)
    return graph.value


def backward(root: Node, wrt=None) -> np.ndarray:
    """Gradient of ``root`` w.r.t. every leaf of its tape (or the nodes in ``wrt``).

    Leaves that do not reach ``root`` get 0.
    """
    ids = None if wrt is None else [int(w) for w in wrt]
    return root.tape.backward(root.index, ids)


def grad_of_grad(loss_after_inner_step: Node, outer_leaves=None, first_order: bool = False) -> np.ndarray:
    """Meta-gradient of a post-adaptation loss w.r.t. the pre-adaptation leaves.

    Exact mode differentiates through the recorded inner gradient; with
    ``first_order=True`` that gradient is held constant, so each adapted
    parameter depends on its source with unit slope.
    """
    tape = loss_after_inner_step.tape
    root = loss_after_inner_step.index
    if not first_order and any(s.detached for s in tape.steps_before(root)):
        raise StateError("exact meta-gradient requested but the inner step was recorded detached")
    ids = None if outer_leaves is None else [int(w) for w in outer_leaves]
    return tape.backward(root, ids, first_order=first_order)
