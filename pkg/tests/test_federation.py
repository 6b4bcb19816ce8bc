from __future__ import annotations

import copy
import json

import numpy as np
import pytest

from pmfl import federation as F
from pmfl import model as M
from pmfl.autodiff import add
from pmfl.data import TaskDataset, TaskFamilySpec, generate_task_family
from pmfl.errors import ConfigError, EvaluationError, ProtocolError

from conftest import central_diff, rel_err

SPEC = M.ModelSpec(3, (4,), "tanh")


def _task(seed=0, n=24, dim=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, dim))
    y = (X[:, 0] + 0.5 * rng.normal(size=n) > 0).astype(int)
    y[:2] = [0, 1]
    return TaskDataset(X, y, f"t{seed}")


def _client(cid=1, seed=0, spec=SPEC, **kw):
    kw.setdefault("inner_rate", 0.1)
    return F.ClientState(cid, _task(seed, dim=spec.input_dim), M.init_params(spec, 100 + cid), spec,
                         rng=np.random.default_rng(seed), **kw)


def _sgd_trace(spec, theta, ds, rng, epochs, batches, eta):
    for _ in range(epochs):
        for rows in np.array_split(rng.permutation(len(ds)), batches):
            theta = theta - eta * M.loss_and_grad(spec, theta, ds.features[rows], ds.labels[rows])[1]
    return theta


# -- local SGD ----------------------------------------------------------------------


def test_single_batch_step_is_closed_form():
    c = _client(batches_per_epoch=1)
    start = M.init_params(SPEC, 0)
    loss, g = M.loss_and_grad(SPEC, start, c.dataset.features, c.dataset.labels)
    rep = F.local_sgd_update(c, start)
    np.testing.assert_allclose(rep.params, start - 0.1 * g, rtol=0, atol=1e-14)
    assert rep.final_loss == pytest.approx(loss, abs=1e-15)


def test_zero_rate_leaves_params():
    c = _client(inner_rate=0.0, batches_per_epoch=1)
    start = M.init_params(SPEC, 0)
    rep = F.local_sgd_update(c, start)
    assert np.array_equal(rep.params, start)
    assert rep.final_loss == pytest.approx(M.mean_bce(SPEC, start, c.dataset.features, c.dataset.labels), abs=1e-12)


def test_two_epochs_match_hand_unrolled_trace():
    c = _client(local_epochs=2, batches_per_epoch=2)
    oracle_rng = copy.deepcopy(c.rng)
    start = M.init_params(SPEC, 0)
    rep = F.local_sgd_update(c, start)
    want = _sgd_trace(SPEC, start, c.dataset, oracle_rng, 2, 2, 0.1)
    np.testing.assert_allclose(rep.params, want, rtol=0, atol=1e-12)
    assert np.array_equal(c.params, rep.params)


def test_equal_batches_per_epoch_across_clients():
    small = F.ClientState(1, _task(0, n=40), np.zeros(SPEC.n_params), SPEC, batches_per_epoch=8)
    big = F.ClientState(2, _task(1, n=200), np.zeros(SPEC.n_params), SPEC, batches_per_epoch=8)
    assert len(small.batches()) == len(big.batches()) == 8
    assert (small.batch_size, big.batch_size) == (5, 25)


def test_empty_dataset_is_config_error():
    c = F.ClientState(1, TaskDataset(np.zeros((0, 3)), np.zeros(0), "e"), np.zeros(SPEC.n_params), SPEC)
    with pytest.raises(ConfigError):
        F.local_sgd_update(c, c.params)
    with pytest.raises(ConfigError):
        F.meta_inner_update(c, c.params)


# -- aggregation ----------------------------------------------------------------------


def _param_report(cid, n, vec):
    return F.ClientReport(cid, n, 0.0, params=np.asarray(vec, dtype=float))


def _grad_report(cid, vec, n=10):
    return F.ClientReport(cid, n, 0.0, gradient=np.asarray(vec, dtype=float))


def test_fedavg_single_client():
    server = F.ServerState(np.zeros(3))
    out = F.fedavg_aggregate([_param_report(1, 7, [1.0, 2.0, 3.0])], server)
    assert out.params.tolist() == [1.0, 2.0, 3.0] and out.round == 1


def test_fedavg_symmetric_cancel():
    v = np.array([0.3, -1.7, 2.2])
    out = F.fedavg_aggregate([_param_report(1, 5, v), _param_report(2, 5, -v)], F.ServerState(np.zeros(3)))
    assert np.array_equal(out.params, np.zeros(3))


def test_fedavg_weighted_mean():
    vs = [np.array([1.0, 0.0]), np.array([0.0, 3.0]), np.array([6.0, -6.0])]
    reps = [_param_report(i + 1, n, v) for i, (n, v) in enumerate(zip((1, 2, 3), vs))]
    out = F.fedavg_aggregate(reps, F.ServerState(np.zeros(2)))
    np.testing.assert_allclose(out.params, (1 * vs[0] + 2 * vs[1] + 3 * vs[2]) / 6, rtol=1e-15)


def test_aggregation_ignores_arrival_order(rng):
    reps = [_param_report(i, int(rng.integers(1, 50)), rng.normal(size=9)) for i in range(1, 6)]
    a = F.fedavg_aggregate(reps, F.ServerState(np.zeros(9)))
    b = F.fedavg_aggregate(reps[::-1], F.ServerState(np.zeros(9)))
    assert np.array_equal(a.params, b.params)
    greps = [_grad_report(i, rng.normal(size=9)) for i in range(1, 6)]
    assert np.array_equal(F.average_payload(greps), F.average_payload([greps[2], greps[0], *greps[3:], greps[1]]))


def test_protocol_errors():
    server = F.ServerState(np.zeros(2))
    with pytest.raises(ProtocolError):
        F.fedavg_aggregate([], server)
    with pytest.raises(ProtocolError):
        F.fedavg_aggregate([_param_report(1, 1, [0, 0]), _grad_report(2, [0, 0])], server)
    with pytest.raises(ProtocolError):
        F.meta_server_update([], F.ServerState(np.zeros(2), "metafl"))
    with pytest.raises(ProtocolError):
        F.ClientReport(1, 1, 0.0)


def test_metafl_single_client_unit_rate():
    g = np.array([0.5, -1.0, 2.0])
    out = F.meta_server_update([_grad_report(1, g)], F.ServerState(np.ones(3), "metafl", 1.0))
    assert np.array_equal(out.params, np.ones(3) - g)


def test_pmfl_all_local_mask_freezes_server(rng):
    theta = rng.normal(size=5)
    server = F.ServerState(theta, "pmfl", 3.0, M.PartitionMask.all_local(5))
    out = F.meta_server_update([_grad_report(i, rng.normal(size=5)) for i in (1, 2)], server)
    assert np.array_equal(out.params, theta)


def test_pmfl_masked_mean_step(rng):
    spec = M.ModelSpec(2, (4,))
    mask = M.partition_mask(spec, 0.5)
    theta = M.init_params(spec, 0)
    gs = [rng.normal(size=spec.n_params) for _ in range(3)]
    out = F.meta_server_update([_grad_report(i + 1, g) for i, g in enumerate(gs)],
                               F.ServerState(theta, "pmfl", 0.2, mask))
    want = theta.copy()
    want[mask.shared] = theta[mask.shared] - 0.2 / 3 * (gs[0] + gs[1] + gs[2])[mask.shared]
    np.testing.assert_allclose(out.params, want, rtol=0, atol=1e-15)
    assert np.array_equal(out.params[mask.local], theta[mask.local])


# -- meta inner update ------------------------------------------------------------------


def test_zero_inner_rate_gives_plain_query_gradient():
    c = _client(inner_rate=0.0, batches_per_epoch=3)
    oracle_rng = copy.deepcopy(c.rng)
    start = M.init_params(SPEC, 0)
    rep = F.meta_inner_update(c, start, track_for_exact=True)
    query = np.array_split(oracle_rng.permutation(len(c.dataset)), 3)[-1]
    loss, g = M.loss_and_grad(SPEC, start, c.dataset.features[query], c.dataset.labels[query])
    np.testing.assert_allclose(rep.gradient, g, rtol=0, atol=1e-15)
    assert rep.final_loss == pytest.approx(loss, abs=1e-15)
    assert np.array_equal(c.params, start)


def _half_square(tape, ids, X, y):
    return (add(*[tape.node(i) * tape.node(i) for i in ids]) * 0.5).index


@pytest.mark.parametrize("alpha", [0.1, 0.3])
def test_quadratic_surrogate_payload(alpha):
    theta = np.array([1.0, -2.0, 0.5])
    c = F.ClientState(1, _task(0), theta.copy(), SPEC, inner_rate=alpha, batches_per_epoch=2,
                      loss_builder=_half_square)
    exact = F.meta_inner_update(c, theta, track_for_exact=True)
    first = F.meta_inner_update(c, theta, track_for_exact=False)
    np.testing.assert_allclose(exact.gradient, (1 - alpha) ** 2 * theta, rtol=1e-14)
    np.testing.assert_allclose(first.gradient, (1 - alpha) * theta, rtol=1e-14)
    assert exact.mode == "exact" and first.mode == "first-order"


def test_exact_payload_matches_finite_differences():
    spec = M.ModelSpec(2, (3, 2), "tanh")
    assert spec.n_params == 20
    c = _client(spec=spec, inner_rate=0.5, batches_per_epoch=2)
    oracle_rng = copy.deepcopy(c.rng)
    start = M.init_params(spec, 3)
    rep = F.meta_inner_update(c, start, track_for_exact=True)
    support, query = np.array_split(oracle_rng.permutation(len(c.dataset)), 2)
    X, y = c.dataset.features, c.dataset.labels

    def composed(th):
        adapted = th - 0.5 * M.loss_and_grad(spec, th, X[support], y[support])[1]
        return M.mean_bce(spec, adapted, X[query], y[query])

    assert rel_err(rep.gradient, central_diff(composed, start)) <= 1e-4


def test_exact_and_first_order_share_adaptation():
    a, b = _client(batches_per_epoch=4), _client(batches_per_epoch=4)
    start = M.init_params(SPEC, 0)
    ra = F.meta_inner_update(a, start, track_for_exact=True)
    rb = F.meta_inner_update(b, start, track_for_exact=False)
    np.testing.assert_allclose(a.params, b.params, rtol=0, atol=1e-12)
    assert ra.final_loss == pytest.approx(rb.final_loss, abs=1e-12)
    assert not np.allclose(ra.gradient, rb.gradient, atol=1e-9)


def test_exact_with_two_epochs_falls_back():
    c = _client(local_epochs=2, batches_per_epoch=3)
    rep = F.meta_inner_update(c, M.init_params(SPEC, 0), track_for_exact=True)
    assert rep.mode == "first-order" and rep.warnings
    server = F.ServerState(M.init_params(SPEC, 0), "metafl", 0.1)
    _, log = F.run_round(server, [_client(local_epochs=2)])
    assert any("first-order" in w for w in log.warnings)


def test_same_batch_query_mode():
    c = _client(inner_rate=0.0, batches_per_epoch=3)
    oracle_rng = copy.deepcopy(c.rng)
    start = M.init_params(SPEC, 0)
    rep = F.meta_inner_update(c, start, query_mode="same-batch")
    query = np.array_split(oracle_rng.permutation(len(c.dataset)), 3)[-1]
    _, g = M.loss_and_grad(SPEC, start, c.dataset.features[query], c.dataset.labels[query])
    np.testing.assert_allclose(rep.gradient, g, atol=1e-15)
    with pytest.raises(ConfigError):
        F.meta_inner_update(c, start, query_mode="bogus")


# -- rounds ------------------------------------------------------------------------------


def test_fedavg_single_client_is_centralised_sgd():
    c = _client(batches_per_epoch=4)
    oracle_rng = copy.deepcopy(c.rng)
    theta = M.init_params(SPEC, 0)
    server = F.ServerState(theta.copy(), "fedavg")
    want = theta
    for _ in range(3):
        server, _ = F.run_round(server, [c])
        want = _sgd_trace(SPEC, want, c.dataset, oracle_rng, 1, 4, 0.1)
        np.testing.assert_allclose(server.params, want, rtol=0, atol=1e-12)


def test_metafl_zero_alpha_is_distributed_sgd():
    clients = [_client(i, seed=i, inner_rate=0.0, batches_per_epoch=3) for i in (1, 2, 3)]
    rngs = [copy.deepcopy(c.rng) for c in clients]
    theta = M.init_params(SPEC, 0)
    server = F.ServerState(theta.copy(), "metafl", 0.4)
    new, _ = F.run_round(server, clients, exact=False)
    grads = []
    for c, r in zip(clients, rngs):
        q = np.array_split(r.permutation(len(c.dataset)), 3)[-1]
        grads.append(M.loss_and_grad(SPEC, theta, c.dataset.features[q], c.dataset.labels[q])[1])
    np.testing.assert_allclose(theta - new.params, 0.4 * sum(grads) / 3, rtol=0, atol=1e-15)


def test_pmfl_distribution_keeps_client_local_region():
    mask = M.partition_mask(SPEC, 0.5)
    clients = [_client(i, seed=i) for i in (1, 2)]
    server = F.ServerState(M.init_params(SPEC, 0), "pmfl", 0.1, mask)
    for c in clients:
        start = F.distribute(server, c)
        assert np.array_equal(start[mask.local], c.params[mask.local])
        assert np.array_equal(start[mask.shared], server.params[mask.shared])


def test_pmfl_server_local_region_is_frozen():
    mask = M.partition_mask(SPEC, 0.5)
    theta0 = M.init_params(SPEC, 0)
    server = F.ServerState(theta0.copy(), "pmfl", 0.5, mask)
    clients = [_client(i, seed=i, batches_per_epoch=3) for i in (1, 2)]
    for _ in range(10):
        server, _ = F.run_round(server, clients)
    assert np.array_equal(server.params[mask.local], theta0[mask.local])
    assert not np.array_equal(server.params[mask.shared], theta0[mask.shared])


def test_two_rounds_compose_from_primitives():
    mask = M.partition_mask(SPEC, 0.5)
    make = lambda: [_client(i, seed=i, batches_per_epoch=3) for i in (1, 2)]
    theta0 = M.init_params(SPEC, 0)
    server = F.ServerState(theta0.copy(), "pmfl", 0.3, mask)
    clients = make()
    for _ in range(2):
        server, _ = F.run_round(server, clients)

    hand = F.ServerState(theta0.copy(), "pmfl", 0.3, mask)
    hand_clients = make()
    for _ in range(2):
        reports = []
        for c in hand_clients:
            start = np.where(mask.shared, hand.params, c.params)
            c.params = start
            reports.append(F.meta_inner_update(c, start, True))
        hand = F.meta_server_update(reports, hand)
    assert np.array_equal(server.params, hand.params)
    for a, b in zip(clients, hand_clients):
        assert np.array_equal(a.params, b.params)


class _Audited:
    """Dataset wrapper that records which client was active on every access."""

    def __init__(self, ds, owner, log):
        self._ds, self.owner, self.log = ds, owner, log

    def __len__(self):
        return len(self._ds)

    @property
    def features(self):
        self.log.append(self.owner)
        return self._ds.features

    @property
    def labels(self):
        self.log.append(self.owner)
        return self._ds.labels


@pytest.mark.parametrize("scheme", F.SCHEMES)
def test_clients_only_read_their_own_data(monkeypatch, scheme):
    accesses, active = [], []
    for name in ("local_sgd_update", "meta_inner_update"):
        original = getattr(F, name)

        def wrapped(client, *a, _orig=original, **kw):
            active.append(client.cid)
            mark = len(accesses)
            out = _orig(client, *a, **kw)
            assert set(accesses[mark:]) <= {client.cid}
            active.pop()
            return out

        monkeypatch.setattr(F, name, wrapped)
    clients = [_client(i, seed=i, batches_per_epoch=3) for i in (1, 2, 3)]
    for c in clients:
        c.dataset = _Audited(c.dataset, c.cid, accesses)
    mask = M.partition_mask(SPEC, 0.5) if scheme == "pmfl" else None
    server = F.ServerState(M.init_params(SPEC, 0), scheme, 0.1, mask)
    before = len(accesses)
    server, _ = F.run_round(server, clients)
    assert set(accesses[before:]) == {1, 2, 3}
    # aggregation itself never touches client data
    n = len(accesses)
    F.ServerState(server.params, scheme, 0.1, mask)
    assert len(accesses) == n


def test_partial_participation():
    clients = [_client(i, seed=i) for i in range(1, 5)]
    server = F.ServerState(M.init_params(SPEC, 0), "fedavg")
    _, log = F.run_round(server, clients, participation=0.5, rng=np.random.default_rng(0))
    assert len(log.client_losses) == 2
    with pytest.raises(ConfigError):
        F.run_round(server, clients, participation=0.5)


def test_round_log_jsonl(tmp_path):
    server = F.ServerState(M.init_params(SPEC, 0), "fedavg")
    clients = [_client(1), _client(2, seed=2)]
    for _ in range(2):
        server, log = F.run_round(server, clients)
        F.append_round_log(tmp_path / "log.jsonl", log)
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    recs = [json.loads(l) for l in lines]
    assert [r["round"] for r in recs] == [1, 2]
    assert set(recs[0]["client_losses"]) == {"1", "2"}


# -- fine-tuning and checkpoints ------------------------------------------------------------


def test_finetune_zero_epochs_scores_pretrained(rng):
    task = _task(5, n=60)
    theta = M.init_params(SPEC, 1)
    reps = F.finetune_and_test(SPEC, theta, task, epochs=0, seed=2)
    assert len(reps) == 1
    from pmfl.data import split

    _, test = split(task, 0.9, 2)
    assert reps[0] == F.evaluate_params(SPEC, theta, test)


def test_finetune_separable_task_reaches_high_auc():
    x = np.linspace(-3, 3, 200)
    task = TaskDataset(x[:, None], (x > 0).astype(int), "sep")
    spec = M.ModelSpec(1, (4,))
    reps = F.finetune_and_test(spec, M.init_params(spec, 0), task, epochs=20, rate=0.5, seed=0)
    assert len(reps) == 21
    assert reps[-1].auc >= 0.99


def test_finetune_is_deterministic():
    task = _task(7, n=80)
    theta = M.init_params(SPEC, 2)
    a = [r.auc for r in F.finetune_and_test(SPEC, theta, task, 3, 0.2, seed=4)]
    b = [r.auc for r in F.finetune_and_test(SPEC, theta, task, 3, 0.2, seed=4)]
    assert a == b


def test_finetune_single_class_is_evaluation_error():
    task = TaskDataset(np.zeros((10, 3)), np.r_[np.ones(9), 0], "one")
    with pytest.raises(EvaluationError):
        F.finetune_and_test(SPEC, M.init_params(SPEC, 0), task, 1)


def test_checkpoint_roundtrip(tmp_path):
    spec = M.ModelSpec(3, (5,), "relu")
    mask = M.partition_mask(spec, 0.4)
    server = F.ServerState(M.init_params(spec, 0), "pmfl", 0.25, mask, round=7)
    F.save_checkpoint(tmp_path / "ck", spec, server)
    spec2, back = F.load_checkpoint(tmp_path / "ck")
    assert spec2 == spec
    assert np.array_equal(back.params, server.params)
    assert np.array_equal(back.mask.shared, mask.shared)
    assert (back.round, back.scheme, back.outer_rate) == (7, "pmfl", 0.25)


def test_server_state_validation():
    with pytest.raises(ConfigError):
        F.ServerState(np.zeros(3), "pmfl")
    with pytest.raises(ConfigError):
        F.ServerState(np.zeros(3), "gossip")
