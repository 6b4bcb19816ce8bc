"""Pure-Python tape kernels.

Reference implementation of the compiled ``_kernels`` extension. Both
backends take the same flat arrays and must produce bit-identical values
and gradients; ``tests/test_kernels.py`` holds them to that.

Array layout (owned by :class:`pmfl.autodiff.tape.Tape`):

``op``      int8, operation code per node
``val``     float64, forward value per node
``need``    uint8, 1 if the node depends on at least one leaf
``stop``    uint8, 1 if first-order sweeps must not propagate through the node
``pstart``  int64, CSR offsets; parents of node ``i`` are
            ``par[pstart[i]:pstart[i + 1]]``
``par``     int64, flattened parent ids
"""

from __future__ import annotations

import math

import numpy as np

from ._ops import (
    ADD,
    CLAMP,
    CLAMP_MASK,
    CONST,
    DIV,
    DOT,
    LEAF,
    LOG,
    MUL,
    NEG,
    NO_ACT,
    PROB_EPS,
    RELU,
    SIGMOID,
    STEP,
    SUB,
    TANH,
)

BACKEND = "python"

_exp = math.exp
_tanh = math.tanh


def _sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + _exp(-z))
    e = _exp(z)
    return e / (1.0 + e)


def _log(x: float) -> float:
    if x > 0.0:
        return math.log(x)
    if x == 0.0:
        return -math.inf
    return math.nan


def _div(a: float, b: float) -> float:
    if b != 0.0:
        return a / b
    if a == 0.0 or a != a:
        return math.nan
    return math.copysign(math.inf, a) * math.copysign(1.0, b)


def apply_op(op: int, pv) -> float:
    """Value of a non-leaf, non-const node given its parents' values."""
    if op == DOT:
        s = 0.0
        for k in range(0, len(pv), 2):
            s += pv[k] * pv[k + 1]
        return s
    if op == ADD:
        s = 0.0
        for x in pv:
            s += x
        return s
    if op == MUL:
        return pv[0] * pv[1]
    if op == SUB:
        return pv[0] - pv[1]
    if op == SIGMOID:
        return _sigmoid(pv[0])
    if op == TANH:
        return _tanh(pv[0])
    if op == LOG:
        return _log(pv[0])
    if op == NEG:
        return -pv[0]
    if op == DIV:
        return _div(pv[0], pv[1])
    if op == RELU:
        x = pv[0]
        return x if x > 0.0 else 0.0
    if op == STEP:
        return 1.0 if pv[0] > 0.0 else 0.0
    if op == CLAMP:
        x = pv[0]
        if x < PROB_EPS:
            return PROB_EPS
        if x > 1.0 - PROB_EPS:
            return 1.0 - PROB_EPS
        return x
    if op == CLAMP_MASK:
        x = pv[0]
        return 1.0 if PROB_EPS <= x <= 1.0 - PROB_EPS else 0.0
    raise ValueError(f"unknown op code {op}")


def replay(op, val, pstart, par, slot, leaf_vals, lo: int, hi: int) -> None:
    """Recompute ``val[lo:hi]`` in topological order."""
    ops = op[:hi].tolist()
    vals = val[:hi].tolist()
    ps = pstart[: hi + 1].tolist()
    base = ps[lo]
    pars = par[base : ps[hi]].tolist()
    for i in range(lo, hi):
        o = ops[i]
        if o == CONST:
            continue
        if o == LEAF:
            vals[i] = float(leaf_vals[slot[i]])
            continue
        vals[i] = apply_op(o, [vals[p] for p in pars[ps[i] - base : ps[i + 1] - base]])
    val[lo:hi] = vals[lo:hi]


def sweep(op, val, need, stop, pstart, par, grad, root: int, floor: int, use_stop: bool) -> None:
    """Reverse accumulation of d(root)/d(node) into ``grad[floor:root + 1]``."""
    ops = op[floor : root + 1].tolist()
    vals = val[: root + 1].tolist()
    needs = need[: root + 1].tolist()
    stops = stop[floor : root + 1].tolist() if use_stop else None
    ps = pstart[floor : root + 2].tolist()
    base = ps[0]
    pars = par[base : ps[-1]].tolist()
    g_acc = [0.0] * (root + 1 - floor)
    g_acc[-1] = 1.0
    for i in range(root, floor - 1, -1):
        li = i - floor
        g = g_acc[li]
        if g == 0.0 or not needs[i]:
            continue
        if stops is not None and stops[li]:
            continue
        o = ops[li]
        if o == LEAF or o == CONST:
            continue
        a = ps[li] - base
        b = ps[li + 1] - base
        if o == DOT:
            for k in range(a, b, 2):
                p = pars[k]
                q = pars[k + 1]
                if p >= floor and needs[p]:
                    g_acc[p - floor] += g * vals[q]
                if q >= floor and needs[q]:
                    g_acc[q - floor] += g * vals[p]
        elif o == ADD:
            for k in range(a, b):
                p = pars[k]
                if p >= floor and needs[p]:
                    g_acc[p - floor] += g
        elif o == MUL:
            p = pars[a]
            q = pars[a + 1]
            if p >= floor and needs[p]:
                g_acc[p - floor] += g * vals[q]
            if q >= floor and needs[q]:
                g_acc[q - floor] += g * vals[p]
        elif o == SUB:
            p = pars[a]
            q = pars[a + 1]
            if p >= floor and needs[p]:
                g_acc[p - floor] += g
            if q >= floor and needs[q]:
                g_acc[q - floor] -= g
        else:
            p = pars[a]
            if o == SIGMOID:
                out = vals[i]
                d = g * (out * (1.0 - out))
            elif o == TANH:
                out = vals[i]
                d = g * (1.0 - out * out)
            elif o == LOG:
                d = _div(g, vals[p])
            elif o == NEG:
                d = -g
            elif o == RELU:
                d = g if vals[p] > 0.0 else 0.0
            elif o == CLAMP:
                x = vals[p]
                d = g if PROB_EPS <= x <= 1.0 - PROB_EPS else 0.0
            elif o == DIV:
                q = pars[a + 1]
                if p >= floor and needs[p]:
                    g_acc[p - floor] += _div(g, vals[q])
                if q >= floor and needs[q]:
                    g_acc[q - floor] -= _div(g * vals[i], vals[q])
                continue
            else:  # STEP, CLAMP_MASK: zero derivative
                continue
            if p >= floor and needs[p]:
                g_acc[p - floor] += d
    grad[floor : root + 1] = g_acc


class _Builder:
    """Collects freshly emitted nodes, then flushes them into the tape arrays."""

    def __init__(self, op, val, need, pstart, par, n: int, npar: int):
        self.arrays = (op, val, need, pstart, par)
        self.n0 = n
        self.np0 = npar
        self.old_vals = val[:n].tolist()
        self.old_need = need[:n].tolist()
        self.ops: list[int] = []
        self.vals: list[float] = []
        self.needs: list[int] = []
        self.counts: list[int] = []
        self.pars: list[int] = []

    def value(self, i: int) -> float:
        return self.old_vals[i] if i < self.n0 else self.vals[i - self.n0]

    def needs_grad(self, i: int) -> int:
        return self.old_need[i] if i < self.n0 else self.needs[i - self.n0]

    def push(self, o: int, parents: list[int], value: float | None = None) -> int:
        if value is None:
            value = apply_op(o, [self.value(p) for p in parents])
        nd = 0
        for p in parents:
            if self.needs_grad(p):
                nd = 1
                break
        self.ops.append(o)
        self.vals.append(value)
        self.needs.append(nd)
        self.counts.append(len(parents))
        self.pars.extend(parents)
        return self.n0 + len(self.ops) - 1

    def flush(self) -> tuple[int, int]:
        op, val, need, pstart, par = self.arrays
        n0, k = self.n0, len(self.ops)
        if k:
            op[n0 : n0 + k] = self.ops
            val[n0 : n0 + k] = self.vals
            need[n0 : n0 + k] = self.needs
            pstart[n0 + 1 : n0 + k + 1] = self.np0 + np.cumsum(self.counts)
            par[self.np0 : self.np0 + len(self.pars)] = self.pars
        return n0 + k, self.np0 + len(self.pars)


def emit_adjoint(op, val, need, pstart, par, n: int, npar: int, root: int, floor: int, terminal):
    """Append nodes computing d(root)/d(node) symbolically.

    Returns ``(n, npar, adj)`` where ``adj[i]`` is the id of the node holding
    the adjoint of node ``i`` for ``floor <= i <= root`` (``-1`` when the
    node does not influence ``root``). Nodes flagged in ``terminal`` receive
    an adjoint but do not propagate it to their parents.
    """
    bld = _Builder(op, val, need, pstart, par, n, npar)
    ops = op[: root + 1].tolist()
    needs = bld.old_need
    ps = pstart[floor : root + 2].tolist()
    base = ps[0]
    pars = par[base : ps[-1]].tolist()
    term = terminal[: root + 1].tolist() if terminal is not None else None
    contribs: list[list[int] | None] = [None] * (root + 1 - floor)
    adj = np.full(root + 1, -1, dtype=np.int64)
    push = bld.push

    c1 = push(CONST, [], 1.0)
    contribs[-1] = [c1]

    def add_contrib(p: int, node: int) -> None:
        lst = contribs[p - floor]
        if lst is None:
            contribs[p - floor] = [node]
        else:
            lst.append(node)

    for i in range(root, floor - 1, -1):
        li = i - floor
        lst = contribs[li]
        if lst is None:
            continue
        A = lst[0] if len(lst) == 1 else push(ADD, lst)
        adj[i] = A
        contribs[li] = None
        o = ops[i]
        if o == LEAF or o == CONST or not needs[i]:
            continue
        if term is not None and term[i]:
            continue
        a = ps[li] - base
        b = ps[li + 1] - base
        if o == DOT:
            for k in range(a, b, 2):
                p = pars[k]
                q = pars[k + 1]
                if p >= floor and needs[p]:
                    add_contrib(p, push(MUL, [A, q]))
                if q >= floor and needs[q]:
                    add_contrib(q, push(MUL, [A, p]))
        elif o == ADD:
            for k in range(a, b):
                p = pars[k]
                if p >= floor and needs[p]:
                    add_contrib(p, A)
        elif o == MUL:
            p = pars[a]
            q = pars[a + 1]
            if p >= floor and needs[p]:
                add_contrib(p, push(MUL, [A, q]))
            if q >= floor and needs[q]:
                add_contrib(q, push(MUL, [A, p]))
        elif o == SUB:
            p = pars[a]
            q = pars[a + 1]
            if p >= floor and needs[p]:
                add_contrib(p, A)
            if q >= floor and needs[q]:
                add_contrib(q, push(NEG, [A]))
        elif o == DIV:
            p = pars[a]
            q = pars[a + 1]
            if p >= floor and needs[p]:
                add_contrib(p, push(DIV, [A, q]))
            if q >= floor and needs[q]:
                t = push(DIV, [i, q])
                t = push(MUL, [A, t])
                add_contrib(q, push(NEG, [t]))
        else:
            p = pars[a]
            if not (p >= floor and needs[p]):
                continue
            if o == SIGMOID:
                t = push(SUB, [c1, i])
                t = push(MUL, [i, t])
                add_contrib(p, push(MUL, [A, t]))
            elif o == TANH:
                t = push(MUL, [i, i])
                t = push(SUB, [c1, t])
                add_contrib(p, push(MUL, [A, t]))
            elif o == LOG:
                add_contrib(p, push(DIV, [A, p]))
            elif o == NEG:
                add_contrib(p, push(NEG, [A]))
            elif o == RELU:
                t = push(STEP, [p])
                add_contrib(p, push(MUL, [A, t]))
            elif o == CLAMP:
                t = push(CLAMP_MASK, [p])
                add_contrib(p, push(MUL, [A, t]))
            # STEP, CLAMP_MASK: zero derivative, nothing to emit
    n, npar = bld.flush()
    return n, npar, adj


def emit_dense(op, val, need, pstart, par, n: int, npar: int, inputs, weights, bias, one: int, act: int, out):
    """Emit ``act(W @ x + b)`` for every input row as DOT (+ activation) nodes.

    ``inputs`` is ``(rows, fan_in)``, ``weights`` ``(fan_out, fan_in)``,
    ``bias`` ``(fan_out,)``; all hold node ids. Output ids go to ``out``.
    """
    bld = _Builder(op, val, need, pstart, par, n, npar)
    rows, fan_in = inputs.shape
    fan_out = weights.shape[0]
    in_ids = inputs.tolist()
    w_ids = weights.tolist()
    b_ids = bias.tolist()
    old = bld.old_vals
    in_vals = [[old[k] for k in row] for row in in_ids]
    w_vals = [[old[k] for k in row] for row in w_ids]
    b_vals = [old[k] for k in b_ids]
    one_val = old[one]
    need_old = bld.old_need
    w_need = [any(need_old[k] for k in row) for row in w_ids]
    b_need = [need_old[k] for k in b_ids]
    result = []
    for s in range(rows):
        xs = in_ids[s]
        xv = in_vals[s]
        x_need = any(need_old[k] for k in xs) or need_old[one]
        row_out = []
        for j in range(fan_out):
            ws = w_ids[j]
            wv = w_vals[j]
            parents = []
            acc = 0.0
            for c in range(fan_in):
                parents.append(ws[c])
                parents.append(xs[c])
                acc += wv[c] * xv[c]
            parents.append(b_ids[j])
            parents.append(one)
            acc += b_vals[j] * one_val
            nd = 1 if (w_need[j] or b_need[j] or x_need) else 0
            bld.ops.append(DOT)
            bld.vals.append(acc)
            bld.needs.append(nd)
            bld.counts.append(len(parents))
            bld.pars.extend(parents)
            node = n + len(bld.ops) - 1
            if act != NO_ACT:
                node = bld.push(act, [node])
            row_out.append(node)
        result.append(row_out)
    out[:, :] = np.asarray(result, dtype=np.int64).reshape(rows, fan_out)
    return bld.flush()


def emit_bce(op, val, need, pstart, par, n: int, npar: int, logits, labels, one: int):
    """Emit the mean binary cross-entropy of ``sigmoid(logits)`` against ``labels``.

    Returns ``(n, npar, root)``.
    """
    bld = _Builder(op, val, need, pstart, par, n, npar)
    push = bld.push
    terms = []
    for z, y in zip(logits.tolist(), labels.tolist()):
        p = push(SIGMOID, [z])
        p = push(CLAMP, [p])
        if y > 0.5:
            terms.append(push(LOG, [p]))
        else:
            q = push(SUB, [one, p])
            terms.append(push(LOG, [q]))
    total = push(ADD, terms)
    scale = push(CONST, [], -1.0 / len(terms))
    root = push(MUL, [total, scale])
    n, npar = bld.flush()
    return n, npar, root
