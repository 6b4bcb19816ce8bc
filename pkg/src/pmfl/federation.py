"""Round-synchronous federation: FedAvg, MetaFL and PMFL clients and servers.

Clients never see one another's data; the only thing that crosses from a
client to the server is a :class:`ClientReport`. Aggregation always walks
reports in ascending client id so results do not depend on arrival order.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .autodiff import Tape
from .data import TaskDataset, split
from .errors import ConfigError, DataError, EvaluationError, ProtocolError, SplitError
from .metrics import EvalReport, youden_optimal

SCHEMES = ("fedavg", "metafl", "pmfl")
QUERY_MODES = ("held-out", "same-batch")

# (tape, param_ids, features, labels) -> root node id
LossBuilder = Callable[[Tape, np.ndarray, np.ndarray, np.ndarray], int]


@dataclass
class ClientState:
    cid: int
    dataset: TaskDataset
    params: np.ndarray
    spec: M.ModelSpec
    inner_rate: float = 1e-3
    local_epochs: int = 1
    batches_per_epoch: int = 32
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    loss_builder: LossBuilder | None = None

    @property
    def n(self) -> int:
        return len(self.dataset)

    @property
    def batch_size(self) -> int:
        """Largest batch when the data is cut into ``batches_per_epoch`` near-equal parts."""
        return math.ceil(self.n / self._n_batches())

    def _n_batches(self) -> int:
        return max(1, min(int(self.batches_per_epoch), self.n))

    def batches(self, rows: np.ndarray | None = None, count: int | None = None) -> list[np.ndarray]:
        """Shuffle ``rows`` (default: all) and cut them into ``count`` near-equal batches."""
        rows = np.arange(self.n) if rows is None else rows
        count = self._n_batches() if count is None else max(1, min(count, rows.shape[0]))
        return np.array_split(self.rng.permutation(rows), count)

    def loss_and_grad(self, params: np.ndarray, rows: np.ndarray) -> tuple[float, np.ndarray]:
        X = self.dataset.features[rows]
        y = self.dataset.labels[rows]
        if self.loss_builder is None:
            return M.loss_and_grad(self.spec, params, X, y)
        tape = Tape()
        ids = tape.add_leaves(params)
        root = self.loss_builder(tape, ids, X, y)
        return float(tape.val[root]), tape.backward(root, wrt=ids)

    def emit_loss(self, tape: Tape, ids: np.ndarray, rows: np.ndarray) -> int:
        X = self.dataset.features[rows]
        y = self.dataset.labels[rows]
        if self.loss_builder is None:
            return M.emit_loss(tape, self.spec, ids, X, y)
        return self.loss_builder(tape, ids, X, y)


@dataclass(frozen=True)
class ServerState:
    params: np.ndarray
    scheme: str = "fedavg"
    outer_rate: float = 1e-2
    mask: M.PartitionMask | None = None
    round: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "pmfl" and self.mask is None:
            raise ConfigError("pmfl server needs a partition mask")
        if self.mask is not None and len(self.mask) != np.shape(self.params)[0]:
            raise ConfigError("mask length differs from parameter count")


@dataclass(frozen=True)
class ClientReport:
    cid: int
    n_k: int
    final_loss: float
    params: np.ndarray | None = None
    gradient: np.ndarray | None = None
    mode: str = "sgd"
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.params is None) == (self.gradient is None):
            raise ProtocolError("a report carries exactly one of params or gradient")

    @property
    def kind(self) -> str:
        return "params" if self.params is not None else "gradient"


@dataclass
class RoundLog:
    round: int
    scheme: str
    client_losses: dict[int, float]
    server_loss: float
    wall_time: float
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "round": self.round,
                "scheme": self.scheme,
                "client_losses": {str(k): v for k, v in sorted(self.client_losses.items())},
                "server_loss": self.server_loss,
                "wall_time": self.wall_time,
                "warnings": self.warnings,
            },
            sort_keys=True,
        )


def append_round_log(path, log: RoundLog) -> None:
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(log.to_json() + "\n")


# -- client updates -----------------------------------------------------------------


def _require_data(client: ClientState) -> None:
    if client.n == 0:
        raise ConfigError(f"client {client.cid} has an empty dataset")


def local_sgd_update(client: ClientState, start) -> ClientReport:
    """Mini-batch SGD at ``inner_rate`` for ``local_epochs`` passes from ``start``.

    The reported loss is the sample-weighted mean of the batch losses seen in
    the final epoch, each measured just before its step.
    """
    _require_data(client)
    theta = np.array(start, dtype=np.float64)
    eta = client.inner_rate
    loss = 0.0
    for _ in range(client.local_epochs):
        total, seen = 0.0, 0
        for rows in client.batches():
            value, g = client.loss_and_grad(theta, rows)
            theta = theta - eta * g
            total += value * rows.shape[0]
            seen += rows.shape[0]
        loss = total / seen
    client.params = theta
    return ClientReport(client.cid, client.n, loss, params=theta.copy())


def _support_query(client: ClientState, query_mode: str) -> tuple[np.ndarray, np.ndarray, int]:
    chunks = client.batches()
    if query_mode not in QUERY_MODES:
        raise ConfigError(f"unknown query mode {query_mode!r}")
    if query_mode == "held-out" and len(chunks) >= 2:
        support = np.sort(np.concatenate(chunks[:-1]))
        return support, chunks[-1], len(chunks) - 1
    return np.arange(client.n), chunks[-1], len(chunks)


def meta_inner_update(
    client: ClientState,
    start,
    track_for_exact: bool = True,
    query_mode: str = "held-out",
) -> ClientReport:
    """Adapt from ``start`` with SGD at ``inner_rate``, then differentiate the query loss.

    The query batch is drawn first and kept out of every inner step of the
    round (``query_mode="held-out"``). The payload is the gradient of the
    query loss at the adapted parameters with respect to ``start``. It is the
    exact second-order gradient through all inner steps when
    ``track_for_exact`` is set and there is a single local epoch; otherwise
    the inner gradients are treated as constants.
    """
    _require_data(client)
    start = np.array(start, dtype=np.float64)
    support, query, n_support = _support_query(client, query_mode)
    warnings: list[str] = []
    exact = track_for_exact
    if exact and client.local_epochs > 1:
        exact = False
        warnings.append(
            f"client {client.cid}: exact meta-gradient needs one local epoch, "
            f"got {client.local_epochs}; using first-order"
        )
    alpha = client.inner_rate
    if exact:
        tape = Tape(capacity=1 << 14)
        leaves = tape.add_leaves(start)
        ids = leaves
        for rows in client.batches(support, n_support):
            ids = tape.inner_step(client.emit_loss(tape, ids, rows), ids, alpha)
        root = client.emit_loss(tape, ids, query)
        loss = float(tape.val[root])
        payload = tape.backward(root, wrt=leaves)
        theta = tape.val[ids].copy()
        mode = "exact"
    else:
        theta = start
        for _ in range(client.local_epochs):
            for rows in client.batches(support, n_support):
                _, g = client.loss_and_grad(theta, rows)
                theta = theta - alpha * g
        loss, payload = client.loss_and_grad(theta, query)
        mode = "first-order"
    client.params = theta
    return ClientReport(client.cid, client.n, loss, gradient=payload, mode=mode, warnings=tuple(warnings))


# -- server aggregation -----------------------------------------------------------------


def _ordered(reports: Sequence[ClientReport], kind: str) -> list[ClientReport]:
    if not reports:
        raise ProtocolError("no client reports to aggregate")
    kinds = {r.kind for r in reports}
    if len(kinds) > 1:
        raise ProtocolError("reports mix parameter and gradient payloads")
    if kinds != {kind}:
        raise ProtocolError(f"expected {kind} payloads, got {kinds.pop()}")
    ids = [r.cid for r in reports]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client id among reports")
    return sorted(reports, key=lambda r: r.cid)


def fedavg_aggregate(reports: Sequence[ClientReport], server: ServerState) -> ServerState:
    """theta = sum_k (n_k / n) theta_k, summed in client-id order."""
    reports = _ordered(reports, "params")
    n = sum(r.n_k for r in reports)
    if n <= 0:
        raise ProtocolError("total sample count must be positive")
    acc = np.zeros_like(np.asarray(server.params, dtype=np.float64))
    for r in reports:
        acc = acc + (r.n_k / n) * r.params
    return replace(server, params=acc, round=server.round + 1)


def average_payload(reports: Sequence[ClientReport]) -> np.ndarray:
    reports = _ordered(reports, "gradient")
    acc = np.zeros_like(reports[0].gradient)
    for r in reports:
        acc = acc + r.gradient
    return acc / len(reports)


def meta_server_update(reports: Sequence[ClientReport], server: ServerState) -> ServerState:
    """Step along the unweighted mean payload; PMFL touches the shared region only."""
    g = average_payload(reports)
    if server.scheme == "pmfl":
        theta = M.apply_masked_update(server.params, g, server.outer_rate, server.mask)
    elif server.scheme == "metafl":
        theta = server.params - server.outer_rate * g
    else:
        raise ProtocolError(f"meta update is undefined for scheme {server.scheme!r}")
    return replace(server, params=theta, round=server.round + 1)


def distribute(server: ServerState, client: ClientState) -> np.ndarray:
    """Starting point for a client: full server model, or its shared region for PMFL."""
    if server.scheme == "pmfl":
        return np.where(server.mask.shared, server.params, client.params)
    return np.array(server.params, dtype=np.float64)


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    *,
    exact: bool = True,
    query_mode: str = "held-out",
    participation: float = 1.0,
    rng: np.random.Generator | None = None,
) -> tuple[ServerState, RoundLog]:
    if not clients:
        raise ProtocolError("a round needs at least one client")
    t0 = time.perf_counter()
    chosen = sorted(clients, key=lambda c: c.cid)
    if participation < 1.0:
        if rng is None:
            raise ConfigError("partial participation needs an rng")
        k = max(1, round(participation * len(chosen)))
        pick = np.sort(rng.choice(len(chosen), size=k, replace=False))
        chosen = [chosen[i] for i in pick]
    reports = []
    for c in chosen:
        start = distribute(server, c)
        if server.scheme == "fedavg":
            reports.append(local_sgd_update(c, start))
        else:
            c.params = start
            reports.append(meta_inner_update(c, start, exact, query_mode))
    if server.scheme == "fedavg":
        new = fedavg_aggregate(reports, server)
        n = sum(r.n_k for r in reports)
        server_loss = sum(r.n_k / n * r.final_loss for r in sorted(reports, key=lambda r: r.cid))
    else:
        new = meta_server_update(reports, server)
        server_loss = sum(r.final_loss for r in sorted(reports, key=lambda r: r.cid)) / len(reports)
    log = RoundLog(
        round=new.round,
        scheme=server.scheme,
        client_losses={r.cid: r.final_loss for r in reports},
        server_loss=float(server_loss),
        wall_time=time.perf_counter() - t0,
        warnings=[w for r in reports for w in r.warnings],
    )
    return new, log


# -- fine-tuning on the server task --------------------------------------------------


def evaluate_params(spec: M.ModelSpec, params, dataset: TaskDataset) -> EvalReport:
    return youden_optimal(M.predict_proba(spec, params, dataset.features), dataset.labels)


def finetune_and_test(
    spec: M.ModelSpec,
    pretrained,
    server_task: TaskDataset,
    epochs: int = 10,
    rate: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    train_fraction: float = 0.9,
) -> list[EvalReport]:
    """Plain SGD on the training part, evaluated on the test part after every epoch.

    Entry 0 of the result scores the untouched pretrained model.
    """
    if epochs < 0 or batch_size < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    try:
        train, test = split(server_task, train_fraction, seed)
    except SplitError as exc:
        raise EvaluationError(str(exc)) from exc
    for part in (train, test):
        try:
            part.require_both_classes()
        except DataError as exc:
            raise EvaluationError(str(exc)) from exc
    rng = np.random.default_rng(seed)
    theta = np.array(pretrained, dtype=np.float64)
    reports = [evaluate_params(spec, theta, test)]
    X, y = train.features, train.labels
    for _ in range(epochs):
        perm = rng.permutation(len(train))
        for lo in range(0, perm.shape[0], batch_size):
            rows = perm[lo : lo + batch_size]
            _, g = M.loss_and_grad(spec, theta, X[rows], y[rows])
            theta = theta - rate * g
        reports.append(evaluate_params(spec, theta, test))
    return reports


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(directory, spec: M.ModelSpec, server: ServerState) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "model": spec.to_dict(),
        "scheme": server.scheme,
        "round": server.round,
        "outer_rate": server.outer_rate,
    }
    if server.mask is not None:
        meta["mask"] = {"fraction": server.mask.fraction, "mode": server.mask.mode}
        (d / "mask.bin").write_bytes(server.mask.to_bytes())
    (d / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    M.save_params(d / "params.bin", server.params)


def load_checkpoint(directory) -> tuple[M.ModelSpec, ServerState]:
    d = Path(directory)
    meta = json.loads((d / "spec.json").read_text(encoding="utf-8"))
    spec = M.ModelSpec.from_dict(meta["model"])
    params = M.load_params(d / "params.bin")
    mask = None
    if "mask" in meta:
        mask = M.PartitionMask.from_bytes((d / "mask.bin").read_bytes(), **meta["mask"])
    server = ServerState(params, meta["scheme"], meta["outer_rate"], mask, meta["round"])
    return spec, server
