# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tape kernels.

Mirror of ``_kernels_py``; same signatures, same evaluation order, so both
backends agree bit for bit. Callers guarantee capacity in every array.
"""

import numpy as np

from libc.math cimport exp, tanh, log, copysign, INFINITY, NAN
from libc.stdint cimport int64_t, int8_t, uint8_t

BACKEND = "cython"

cdef enum:
    CONST = 0
    LEAF = 1
    ADD = 2
    SUB = 3
    MUL = 4
    DIV = 5
    NEG = 6
    SIGMOID = 7
    TANH = 8
    RELU = 9
    LOG = 10
    DOT = 11
    STEP = 12
    CLAMP = 13
    CLAMP_MASK = 14
    NO_ACT = -1

cdef double PROB_EPS = 1e-12

OP_CODES = {
    "CONST": CONST,
    "LEAF": LEAF,
    "ADD": ADD,
    "SUB": SUB,
    "MUL": MUL,
    "DIV": DIV,
    "NEG": NEG,
    "SIGMOID": SIGMOID,
    "TANH": TANH,
    "RELU": RELU,
    "LOG": LOG,
    "DOT": DOT,
    "STEP": STEP,
    "CLAMP": CLAMP,
    "CLAMP_MASK": CLAMP_MASK,
    "NO_ACT": NO_ACT,
}


cdef inline double _sigmoid(double z) noexcept nogil:
    cdef double e
    if z >= 0.0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef inline double _log(double x) noexcept nogil:
    if x > 0.0:
        return log(x)
    if x == 0.0:
        return -INFINITY
    return NAN


cdef inline double _div(double a, double b) noexcept nogil:
    if b != 0.0:
        return a / b
    if a == 0.0 or a != a:
        return NAN
    return copysign(INFINITY, a) * copysign(1.0, b)


cdef double _apply(int8_t o, double* val, int64_t* par, int64_t a, int64_t b) noexcept nogil:
    cdef double s = 0.0, x
    cdef int64_t k
    if o == DOT:
        k = a
        while k < b:
            s += val[par[k]] * val[par[k + 1]]
            k += 2
        return s
    if o == ADD:
        for k in range(a, b):
            s += val[par[k]]
        return s
    if o == MUL:
        return val[par[a]] * val[par[a + 1]]
    if o == SUB:
        return val[par[a]] - val[par[a + 1]]
    if o == SIGMOID:
        return _sigmoid(val[par[a]])
    if o == TANH:
        return tanh(val[par[a]])
    if o == LOG:
        return _log(val[par[a]])
    if o == NEG:
        return -val[par[a]]
    if o == DIV:
        return _div(val[par[a]], val[par[a + 1]])
    if o == RELU:
        x = val[par[a]]
        return x if x > 0.0 else 0.0
    if o == STEP:
        return 1.0 if val[par[a]] > 0.0 else 0.0
    if o == CLAMP:
        x = val[par[a]]
        if x < PROB_EPS:
            return PROB_EPS
        if x > 1.0 - PROB_EPS:
            return 1.0 - PROB_EPS
        return x
    if o == CLAMP_MASK:
        x = val[par[a]]
        return 1.0 if (PROB_EPS <= x and x <= 1.0 - PROB_EPS) else 0.0
    return NAN


def apply_op(int o, pv):
    """Value of a node given its parents' values (slow path, for tests)."""
    cdef Py_ssize_t m = len(pv), k
    vals_a = np.asarray(list(pv) + [0.0], dtype=np.float64)
    idx_a = np.arange(m + 1, dtype=np.int64)
    cdef double[::1] vals = vals_a
    cdef int64_t[::1] idx = idx_a
    if o not in (ADD, SUB, MUL, DIV, NEG, SIGMOID, TANH, RELU, LOG, DOT, STEP, CLAMP, CLAMP_MASK):
        raise ValueError(f"unknown op code {o}")
    return _apply(o, &vals[0], &idx[0], 0, m)


cdef struct Emit:
    int8_t* op
    double* val
    uint8_t* need
    int64_t* pstart
    int64_t* par
    int64_t n
    int64_t np


cdef inline int64_t _close(Emit* e, int8_t o, int64_t a) noexcept nogil:
    """Finalize node ``e.n`` whose parents were written to ``par[a:e.np]``."""
    cdef int64_t k, b = e.np
    cdef uint8_t nd = 0
    for k in range(a, b):
        if e.need[e.par[k]]:
            nd = 1
            break
    e.op[e.n] = o
    e.need[e.n] = nd
    e.pstart[e.n + 1] = b
    e.val[e.n] = _apply(o, e.val, e.par, a, b)
    e.n += 1
    return e.n - 1


cdef inline int64_t _e1(Emit* e, int8_t o, int64_t x) noexcept nogil:
    cdef int64_t a = e.np
    e.par[a] = x
    e.np = a + 1
    return _close(e, o, a)


cdef inline int64_t _e2(Emit* e, int8_t o, int64_t x, int64_t y) noexcept nogil:
    cdef int64_t a = e.np
    e.par[a] = x
    e.par[a + 1] = y
    e.np = a + 2
    return _close(e, o, a)


cdef inline int64_t _econst(Emit* e, double v) noexcept nogil:
    e.op[e.n] = CONST
    e.val[e.n] = v
    e.need[e.n] = 0
    e.pstart[e.n + 1] = e.np
    e.n += 1
    return e.n - 1


cdef Emit _emitter(int8_t[::1] op, double[::1] val, uint8_t[::1] need, int64_t[::1] pstart,
                   int64_t[::1] par, int64_t n, int64_t npar):
    cdef Emit e
    e.op = &op[0]
    e.val = &val[0]
    e.need = &need[0]
    e.pstart = &pstart[0]
    e.par = &par[0]
    e.n = n
    e.np = npar
    return e


def replay(int8_t[::1] op, double[::1] val, int64_t[::1] pstart, int64_t[::1] par,
           int64_t[::1] slot, double[::1] leaf_vals, int64_t lo, int64_t hi):
    cdef int64_t i
    cdef int8_t o
    with nogil:
        for i in range(lo, hi):
            o = op[i]
            if o == CONST:
                continue
            if o == LEAF:
                val[i] = leaf_vals[slot[i]]
                continue
            val[i] = _apply(o, &val[0], &par[0], pstart[i], pstart[i + 1])


def sweep(int8_t[::1] op, double[::1] val, uint8_t[::1] need, uint8_t[::1] stop,
          int64_t[::1] pstart, int64_t[::1] par, double[::1] grad, int64_t root,
          int64_t floor, bint use_stop):
    cdef int64_t i, k, a, b, p, q
    cdef int8_t o
    cdef double g, d, out, x
    with nogil:
        for i in range(floor, root + 1):
            grad[i] = 0.0
        grad[root] = 1.0
        i = root
        while i >= floor:
            g = grad[i]
            if g == 0.0 or not need[i] or (use_stop and stop[i]):
                i -= 1
                continue
            o = op[i]
            if o == LEAF or o == CONST:
                i -= 1
                continue
            a = pstart[i]
            b = pstart[i + 1]
            if o == DOT:
                k = a
                while k < b:
                    p = par[k]
                    q = par[k + 1]
                    if p >= floor and need[p]:
                        grad[p] += g * val[q]
                    if q >= floor and need[q]:
                        grad[q] += g * val[p]
                    k += 2
            elif o == ADD:
                for k in range(a, b):
                    p = par[k]
                    if p >= floor and need[p]:
                        grad[p] += g
            elif o == MUL:
                p = par[a]
                q = par[a + 1]
                if p >= floor and need[p]:
                    grad[p] += g * val[q]
                if q >= floor and need[q]:
                    grad[q] += g * val[p]
            elif o == SUB:
                p = par[a]
                q = par[a + 1]
                if p >= floor and need[p]:
                    grad[p] += g
                if q >= floor and need[q]:
                    grad[q] -= g
            elif o == DIV:
                p = par[a]
                q = par[a + 1]
                if p >= floor and need[p]:
                    grad[p] += _div(g, val[q])
                if q >= floor and need[q]:
                    grad[q] -= _div(g * val[i], val[q])
            elif o == STEP or o == CLAMP_MASK:
                pass
            else:
                p = par[a]
                if p >= floor and need[p]:
                    if o == SIGMOID:
                        out = val[i]
                        d = g * (out * (1.0 - out))
                    elif o == TANH:
                        out = val[i]
                        d = g * (1.0 - out * out)
                    elif o == LOG:
                        d = _div(g, val[p])
                    elif o == NEG:
                        d = -g
                    elif o == RELU:
                        d = g if val[p] > 0.0 else 0.0
                    else:  # CLAMP
                        x = val[p]
                        d = g if (PROB_EPS <= x and x <= 1.0 - PROB_EPS) else 0.0
                    grad[p] += d
            i -= 1


def emit_adjoint(int8_t[::1] op, double[::1] val, uint8_t[::1] need, int64_t[::1] pstart,
                 int64_t[::1] par, int64_t n, int64_t npar, int64_t root, int64_t floor,
                 terminal):
    cdef uint8_t[::1] term
    cdef bint has_term = terminal is not None
    if has_term:
        term = terminal
    cdef int64_t span = root + 1 - floor
    cdef int64_t edges = pstart[root + 1] - pstart[floor]
    head_a = np.full(span, -1, dtype=np.int64)
    tail_a = np.full(span, -1, dtype=np.int64)
    cnt_a = np.zeros(span, dtype=np.int64)
    nxt_a = np.full(edges + 2, -1, dtype=np.int64)
    cnode_a = np.empty(edges + 2, dtype=np.int64)
    adj_a = np.full(root + 1, -1, dtype=np.int64)
    cdef int64_t[::1] head = head_a, tail = tail_a, cnt = cnt_a, nxt = nxt_a
    cdef int64_t[::1] cnode = cnode_a, adj = adj_a
    cdef int64_t nc = 0
    cdef Emit e = _emitter(op, val, need, pstart, par, n, npar)
    cdef int64_t i, li, k, a, b, p, q, t, A, c1, entry, start
    cdef int8_t o
    with nogil:
        c1 = _econst(&e, 1.0)
        cnode[0] = c1
        head[span - 1] = 0
        tail[span - 1] = 0
        cnt[span - 1] = 1
        nc = 1
        i = root
        while i >= floor:
            li = i - floor
            if head[li] < 0:
                i -= 1
                continue
            if cnt[li] == 1:
                A = cnode[head[li]]
            else:
                start = e.np
                entry = head[li]
                while entry >= 0:
                    e.par[e.np] = cnode[entry]
                    e.np += 1
                    entry = nxt[entry]
                A = _close(&e, ADD, start)
            adj[i] = A
            o = op[i]
            if o == LEAF or o == CONST or not need[i] or (has_term and term[i]):
                i -= 1
                continue
            a = pstart[i]
            b = pstart[i + 1]
            if o == DOT:
                k = a
                while k < b:
                    p = par[k]
                    q = par[k + 1]
                    if p >= floor and need[p]:
                        t = _e2(&e, MUL, A, q)
                        nc = _add_contrib(head, tail, cnt, nxt, cnode, nc, p - floor, t)
                    if q >= floor and need[q]:
                        t = _e2(&e, MUL, A, p)
                        nc = _add_contrib(head, tail, cnt, nxt, cnode, nc, q - floor, t)
                    k += 2
            elif o == ADD:
                for k in range(a, b):
                    p = par[k]
                    if p >= floor and need[p]:
                        nc = _add_contrib(head, tail, cnt, nxt, cnode, nc, p - floor, A)
            elif o == MUL:
                p = par[a]
                q = par[a + 1]
                if p >= floor and need[p]:
                    t = _e2(&e, MUL, A, q)
                    nc = _add_contrib(head, tail, cnt, nxt, cnode, nc, p - floor, t)
                if q >= floor and need[q]:
                    t = _e2(&e, MUL, A, p)
                    nc = _add_contrib(head, tail, cnt, nxt, cnode, nc, q - floor, t)
            elif o == SUB:
                p = par[a]
                q = par[a + 1]
                if p >= floor and need[p]:
                    nc = _add_contrib(head, tail, cnt, nxt, cnode, nc, p - floor, A)
                if q >= floor and need[q]:
                    t = _e1(&e, NEG, A)
                    nc = _add_contrib(head, tail, cnt, nxt, cnode, nc, q - floor, t)
            elif o == DIV:
                p = par[a]
                q = par[a + 1]
                if p >= floor and need[p]:
                    t = _e2(&e, DIV, A, q)
                    nc = _add_contrib(head, tail, cnt, nxt, cnode, nc, p - floor, t)
                if q >= floor and need[q]:
                    t = _e2(&e, DIV, i, q)
                    t = _e2(&e, MUL, A, t)
                    t = _e1(&e, NEG, t)
                    nc = _add_contrib(head, tail, cnt, nxt, cnode, nc, q - floor, t)
            else:
                p = par[a]
                if p >= floor and need[p]:
                    t = -1
                    if o == SIGMOID:
                        t = _e2(&e, SUB, c1, i)
                        t = _e2(&e, MUL, i, t)
                        t = _e2(&e, MUL, A, t)
                    elif o == TANH:
                        t = _e2(&e, MUL, i, i)
                        t = _e2(&e, SUB, c1, t)
                        t = _e2(&e, MUL, A, t)
                    elif o == LOG:
                        t = _e2(&e, DIV, A, p)
                    elif o == NEG:
                        t = _e1(&e, NEG, A)
                    elif o == RELU:
                        t = _e1(&e, STEP, p)
                        t = _e2(&e, MUL, A, t)
                    elif o == CLAMP:
                        t = _e1(&e, CLAMP_MASK, p)
                        t = _e2(&e, MUL, A, t)
                    if t >= 0:
                        nc = _add_contrib(head, tail, cnt, nxt, cnode, nc, p - floor, t)
            i -= 1
    return e.n, e.np, adj_a


cdef inline int64_t _add_contrib(int64_t[::1] head, int64_t[::1] tail, int64_t[::1] cnt,
                                 int64_t[::1] nxt, int64_t[::1] cnode, int64_t nc,
                                 int64_t slot, int64_t node) noexcept nogil:
    cnode[nc] = node
    nxt[nc] = -1
    if head[slot] < 0:
        head[slot] = nc
    else:
        nxt[tail[slot]] = nc
    tail[slot] = nc
    cnt[slot] += 1
    return nc + 1


def emit_dense(int8_t[::1] op, double[::1] val, uint8_t[::1] need, int64_t[::1] pstart,
               int64_t[::1] par, int64_t n, int64_t npar, int64_t[:, ::1] inputs,
               int64_t[:, ::1] weights, int64_t[::1] bias, int64_t one, int act,
               int64_t[:, ::1] out):
    cdef int64_t rows = inputs.shape[0], fan_in = inputs.shape[1]
    cdef int64_t fan_out = weights.shape[0]
    cdef int64_t s, j, c, start, node
    cdef Emit e = _emitter(op, val, need, pstart, par, n, npar)
    with nogil:
        for s in range(rows):
            for j in range(fan_out):
                start = e.np
                for c in range(fan_in):
                    e.par[e.np] = weights[j, c]
                    e.par[e.np + 1] = inputs[s, c]
                    e.np += 2
                e.par[e.np] = bias[j]
                e.par[e.np + 1] = one
                e.np += 2
                node = _close(&e, DOT, start)
                if act != NO_ACT:
                    node = _e1(&e, <int8_t>act, node)
                out[s, j] = node
    return e.n, e.np


def emit_bce(int8_t[::1] op, double[::1] val, uint8_t[::1] need, int64_t[::1] pstart,
             int64_t[::1] par, int64_t n, int64_t npar, int64_t[::1] logits,
             double[::1] labels, int64_t one):
    cdef int64_t m = logits.shape[0]
    terms_a = np.empty(m, dtype=np.int64)
    cdef int64_t[::1] terms = terms_a
    cdef int64_t s, p, start, total, scale, root
    cdef Emit e = _emitter(op, val, need, pstart, par, n, npar)
    with nogil:
        for s in range(m):
            p = _e1(&e, SIGMOID, logits[s])
            p = _e1(&e, CLAMP, p)
            if labels[s] > 0.5:
                terms[s] = _e1(&e, LOG, p)
            else:
                p = _e2(&e, SUB, one, p)
                terms[s] = _e1(&e, LOG, p)
        start = e.np
        for s in range(m):
            e.par[e.np] = terms[s]
            e.np += 1
        total = _close(&e, ADD, start)
        scale = _econst(&e, -1.0 / m)
        root = _e2(&e, MUL, total, scale)
    return e.n, e.np, root
