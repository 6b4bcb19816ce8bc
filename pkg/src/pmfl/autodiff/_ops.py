"""Node operation codes shared by the tape and both kernel backends."""

CONST = 0
LEAF = 1
ADD = 2  # n-ary sum
SUB = 3
MUL = 4
DIV = 5
NEG = 6
SIGMOID = 7
TANH = 8
RELU = 9
LOG = 10
DOT = 11  # matmul element: sum of pairwise products of (p0*p1 + p2*p3 + ...)
STEP = 12  # 1.0 if x > 0 else 0.0; zero derivative
CLAMP = 13  # clamp probability into [PROB_EPS, 1 - PROB_EPS]
CLAMP_MASK = 14  # 1.0 where CLAMP passes its input through; zero derivative

NO_ACT = -1

PROB_EPS = 1e-12

NAMES = {
    CONST: "const",
    LEAF: "leaf",
    ADD: "add",
    SUB: "sub",
    MUL: "mul",
    DIV: "div",
    NEG: "neg",
    SIGMOID: "sigmoid",
    TANH: "tanh",
    RELU: "relu",
    LOG: "log",
    DOT: "dot",
    STEP: "step",
    CLAMP: "clamp",
    CLAMP_MASK: "clamp_mask",
}
