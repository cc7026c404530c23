import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fleettrend.fleet_graph import FleetGraph
from fleettrend.gae_array import BranchParams, Decomposition, ModelConfig, init_params, model_forward
from fleettrend.objective import LossWeights, loss_and_gradients
from fleettrend.para_trainer import (
    Adam,
    LayerPipeline,
    Replica,
    SplitError,
    TrainConfig,
    TrainingDiverged,
    WorkerFailure,
    aggregate_replicas,
    benchmark_speedup,
    fan_in_gains,
    fit_normalization,
    local_regularizer,
    make_node_batches,
    split_nodes,
    train_parallel,
    train_serial,
)
from fleettrend.para_trainer import ConfigError


@pytest.fixture
def problem():
    rng = np.random.default_rng(0)
    g = FleetGraph.from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)])
    t = np.arange(64)
    X = 100 - 0.02 * t + 5 * np.sin(2 * np.pi * t / 16) + rng.normal(0, 0.5, size=(6, 64))
    mc = ModelConfig(series_len=64, k=1, hidden_dim=8, latent_dim=4, n_heads=2, window_sizes=(16,), seed=3)
    tc = TrainConfig(epochs=5, weights=LossWeights(segment_window=(16,)), slice_windows=(64, 64), seed=1)
    return X, g, mc, tc


def _max_rel(a: BranchParams, b: BranchParams) -> float:
    worst = 0.0
    for name, x in a.arrays().items():
        y = b.arrays()[name]
        worst = max(worst, float(np.max(np.abs(x - y)) / max(np.max(np.abs(x)), 1e-300)))
    return worst


# -- splits, normalization, optimizer ----------------------------------------


def test_paper_split_sizes():
    masks = split_nodes(100, (0.5, 0.25, 0.25), seed=4)
    assert [int(m.sum()) for m in masks] == [50, 25, 25]
    stacked = np.vstack(masks)
    assert np.all(stacked.sum(axis=0) == 1)
    again = split_nodes(100, (0.5, 0.25, 0.25), seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(masks, again))


@given(st.integers(3, 200), st.integers(0, 1000))
def test_split_is_a_partition(n, seed):
    masks = split_nodes(n, (0.5, 0.25, 0.25), seed)
    assert np.all(np.vstack(masks).sum(axis=0) == 1)


def test_split_errors():
    with pytest.raises(SplitError):
        split_nodes(2, (0.5, 0.25, 0.25))
    with pytest.raises(SplitError):
        split_nodes(10, (0.5, 0.5, 0.0))
    with pytest.raises(ConfigError):
        TrainConfig(split=(0.5, 0.5, 0.5))


def test_normalization_units():
    X = np.array([[99.0, 101.0], [100.0, 100.0]])
    n = fit_normalization(X)
    assert (n.offset, n.scale, n.input_scale) == (100.0, 1.0, 100.0)
    z = fit_normalization(np.array([[-2.0, 2.0]]))
    assert (z.offset, z.scale, z.input_scale) == (0.0, 0.02, 2.0)
    assert fit_normalization(np.zeros((2, 2))).input_scale == 1.0


def test_fan_in_gains():
    gains = fan_in_gains({"w": np.zeros((3, 16)), "a": np.zeros(4)})
    assert gains == {"w": 0.25, "a": 0.5}


def test_adam_zero_step_and_known_first_step():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p, lr=0.0)
    for _ in range(3):
        opt.step({"w": np.array([0.3, -0.7])})
    assert p["w"].tolist() == [1.0, -2.0]
    q = {"w": np.array([1.0, -2.0])}
    Adam(q, lr=0.1, gains={"w": 0.5}).step({"w": np.array([0.3, -0.7])})
    # the first bias-corrected step is lr * gain * sign(g) up to eps
    assert np.allclose(q["w"], [1.0 - 0.05, -2.0 + 0.05], atol=1e-9)


def test_gains_equal_adam_on_rescaled_parameters():
    rng = np.random.default_rng(0)
    c = 0.25
    W = rng.normal(size=5)
    V = W / c
    pw, pv = {"x": W.copy()}, {"x": V.copy()}
    ow, ov = Adam(pw, 0.05, eps=0.0, gains={"x": c}), Adam(pv, 0.05, eps=0.0)
    for _ in range(10):
        g = rng.normal(size=5)
        ow.step({"x": g})
        ov.step({"x": g * c})  # chain rule through W = c V
    assert np.allclose(pw["x"], c * pv["x"], rtol=1e-12)


def test_tiny_learning_rate_barely_moves(problem):
    X, g, mc, tc = problem
    model, _ = train_serial(X, g, mc, replace(tc, learning_rate=1e-14))
    assert _max_rel(init_params(mc)[0], model.branches[0]) < 1e-10


# -- aggregation -------------------------------------------------------------


def _constant_branch(template: BranchParams, value: float) -> BranchParams:
    return BranchParams.from_arrays({k: np.full_like(v, value) for k, v in template.arrays().items()})


def test_aggregate_examples(tiny_config):
    t = init_params(tiny_config)[0]
    assert _max_rel(t, aggregate_replicas([t, t.copy()])) == 0.0
    mid = aggregate_replicas([_constant_branch(t, 0.0), _constant_branch(t, 2.0)])
    assert all(np.all(a == 1.0) for a in mid.arrays().values())
    three = aggregate_replicas([_constant_branch(t, v) for v in (0.0, 3.0, 6.0)])
    assert all(np.all(a == 3.0) for a in three.arrays().values())
    weighted = aggregate_replicas([_constant_branch(t, 0.0), _constant_branch(t, 4.0)], [3, 1])
    assert all(np.allclose(a, 1.0) for a in weighted.arrays().values())
    with pytest.raises(ValueError):
        aggregate_replicas([])
    other = init_params(replace(tiny_config, hidden_dim=4))[0]
    with pytest.raises(ValueError):
        aggregate_replicas([t, other])


@given(st.permutations(range(4)))
def test_aggregate_ignores_order(perm):
    cfg = ModelConfig(series_len=8, k=1, hidden_dim=4, latent_dim=2, n_heads=2, window_sizes=(4,))
    reps = [init_params(replace(cfg, seed=s))[0] for s in range(4)]
    a = aggregate_replicas(reps)
    b = aggregate_replicas([reps[i] for i in perm])
    assert _max_rel(a, b) < 1e-15


# -- serial reference --------------------------------------------------------


def test_serial_descends_and_is_deterministic(problem):
    X, g, mc, tc = problem
    tc = replace(tc, epochs=51)
    m1, log1 = train_serial(X, g, mc, tc)
    m2, log2 = train_serial(X, g, mc, tc)
    assert log1[50]["total"] < log1[0]["total"]
    assert [r["total"] for r in log1] == [r["total"] for r in log2]
    for a, b in zip(m1.branches, m2.branches):
        assert _max_rel(a, b) == 0.0
    assert set(log1[0]) >= {"step", "epoch", "branch", "slice", "re", "mc", "sc", "sr", "total"}


def test_divergence_aborts_with_last_finite_step(problem):
    X, g, mc, tc = problem
    X = X.copy()
    X[0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train_serial(X, g, mc, tc)
    assert info.value.last_finite_epoch == -1


def test_checkpoint_hook(problem):
    X, g, mc, tc = problem
    seen = []
    train_serial(X, g, mc, replace(tc, epochs=6, checkpoint_every=2),
                 on_checkpoint=lambda epoch, model: seen.append(epoch))
    assert seen == [2, 4, 6]
    seen.clear()
    train_parallel(X, g, mc, replace(tc, epochs=6, checkpoint_every=2),
                   on_checkpoint=lambda epoch, model: seen.append(epoch))
    assert seen == [2, 4]


def test_shape_mismatch_rejected(problem):
    X, g, mc, tc = problem
    with pytest.raises(ConfigError):
        train_serial(X[:, :60], g, mc, tc)


# -- parallel schedule -------------------------------------------------------


def test_degenerate_schedule_matches_serial(problem):
    X, g, mc, tc = problem
    ms, ls = train_serial(X, g, mc, tc)
    mp, lp, report = train_parallel(X, g, mc, replace(tc, n_workers=1, node_batch_size=0))
    for a, b in zip(ms.branches, mp.branches):
        assert _max_rel(a, b) <= 1e-5
    glob = [r["total"] for r in lp if r["branch"] is None]
    assert np.allclose(glob, [r["total"] for r in ls], rtol=1e-10)
    assert report.n_workers == 1 and len(report.epoch_times) == tc.epochs


def test_worker_count_does_not_change_results(problem):
    X, g, mc, tc = problem
    tc = replace(tc, slice_windows=None)  # aging and fluctuation branches on 16-sample slices
    one = train_parallel(X, g, mc, tc)[0]
    three = train_parallel(X, g, mc, replace(tc, n_workers=3))[0]
    for a, b in zip(one.branches, three.branches):
        assert _max_rel(a, b) < 1e-10


def test_node_batching_matches_full_graph(problem):
    X, g, mc, tc = problem
    full = train_parallel(X, g, mc, tc)[0]
    batched = train_parallel(X, g, mc, replace(tc, node_batch_size=2))[0]
    for a, b in zip(full.branches, batched.branches):
        assert _max_rel(a, b) < 1e-9


def test_pipeline_is_bitwise_equal(problem):
    X, g, mc, tc = problem
    tc = replace(tc, node_batch_size=2, epochs=3)
    piped = train_parallel(X, g, mc, tc)[0]
    plain = train_parallel(X, g, mc, replace(tc, pipeline=False))[0]
    for a, b in zip(piped.branches, plain.branches):
        assert _max_rel(a, b) == 0.0


def test_layer_pipeline_order_and_errors():
    stages = [lambda x: x + 1, lambda x: x * 10, lambda x: x - 3]
    assert LayerPipeline(stages).run(list(range(6))) == [(i + 1) * 10 - 3 for i in range(6)]

    def boom(x):
        raise RuntimeError("stage failed")

    with pytest.raises(RuntimeError, match="stage failed"):
        LayerPipeline([lambda x: x, boom]).run([1, 2, 3])


def test_batches_cover_nodes_with_receptive_field(problem):
    _, g, _, _ = problem
    batches = make_node_batches(g, 2, seed=0)
    nodes = np.concatenate([b.nodes for b in batches])
    assert sorted(nodes.tolist()) == list(range(6))
    for b in batches:
        assert np.array_equal(b.halo, g.ball(b.nodes, 4))
        assert np.array_equal(b.halo[b.position], b.nodes)


def test_broadcast_residual_gradient_equals_joint_gradient(problem):
    X, g, mc, tc = problem
    rng = np.random.default_rng(3)
    T = mc.series_len
    h_a, h_f = rng.normal(size=(6, T)), rng.normal(size=(6, T))
    Y = rng.normal(size=(6, T))
    rows = np.array([0, 2, 3])
    w = tc.weights
    _, g_a, g_f = loss_and_gradients(Y, Decomposition(h_a, [h_f]), w, mask=rows)
    params = init_params(mc)
    batches = make_node_batches(g, 0)
    for branch, out, joint in ((0, h_a, g_a), (1, h_f, g_f[0])):
        rep = Replica(branch, 0, 0, T, 0, params[branch], None, batches, centered=False)
        _, _, local = local_regularizer(rep, out, rows, T, mc.k, mc, w)
        resid = Y - h_a - h_f
        g_re = np.zeros_like(resid)
        g_re[rows] = -2.0 * resid[rows] / (rows.size * T)
        assert np.allclose(g_re + local, joint, rtol=0, atol=1e-10)


def test_three_term_replica_layout():
    rng = np.random.default_rng(0)
    g = FleetGraph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    X = 50 + rng.normal(size=(4, 48))
    mc = ModelConfig(series_len=48, k=3, hidden_dim=8, latent_dim=4, n_heads=2, window_sizes=(4, 12, 24))
    tc = TrainConfig(epochs=2, weights=LossWeights(segment_window=(4, 12, 24)))
    model, records, report = train_parallel(X, g, mc, replace(tc, n_workers=2))
    per_branch = {}
    for r in records:
        if r["branch"] is not None and r["epoch"] == 0:
            per_branch.setdefault(r["branch"], set()).add(r["slice"])
    # aging branch uses the smallest window
    assert {b: len(s) for b, s in per_branch.items()} == {0: 12, 1: 12, 2: 4, 3: 2}
    assert report.n_replicas == 30
    assert model.config.branch_lengths == (4, 4, 12, 24)
    d = model.decompose(X, g)
    assert d.k == 3 and d.h_a.shape == X.shape


def test_worker_failure_is_reported(problem, monkeypatch):
    X, g, mc, tc = problem

    def broken(self, grad_out):
        raise RuntimeError("injected")

    monkeypatch.setattr(Replica, "backward", broken)
    with pytest.raises(WorkerFailure, match="injected"):
        train_parallel(X, g, mc, replace(tc, n_workers=2))


def test_benchmark_table(problem):
    X, g, mc, tc = problem
    tc = replace(tc, epochs=3, slice_windows=None)
    report = benchmark_speedup(X, g, mc, tc, [1, 2, 4])
    assert [r["workers"] for r in report.rows] == [1, 2, 4]
    assert report.rows[0]["speedup"] == 1.0 and report.rows[0]["overhead_s"] == 0.0
    assert report.table().splitlines()[0] == "workers,epoch_time_s,speedup"
    assert any("exceed the 2 branches" in f for f in report.flags)
    for r in report.rows:
        assert math.isfinite(r["epoch_time_s"]) and r["n_messages"] > 0
    with pytest.raises(ValueError):
        benchmark_speedup(X, g, mc, tc, [2, 4])


def test_serial_model_decomposes_in_data_units(problem):
    X, g, mc, tc = problem
    model, log = train_serial(X, g, mc, replace(tc, epochs=20))
    d = model.decompose(X, g)
    out = model_forward(model.normalize(X), g, model.branches, mc)
    assert np.allclose(d.h_a, out.h_a * model.scale + model.offset)
    assert np.allclose(model.target(d.reconstruction()), out.reconstruction(), atol=1e-9)
    assert log[-1]["total"] < log[0]["total"]


@pytest.mark.parametrize("branch, batch_size", [(0, 0), (1, 0), (1, 2)])
def test_backprop_matches_finite_differences(branch, batch_size):
    import oracles

    rng = np.random.default_rng(11)
    g = FleetGraph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    mc = ModelConfig(series_len=6, k=1, hidden_dim=4, latent_dim=2, n_heads=2, window_sizes=(3,))
    params = init_params(mc)[branch]
    X = rng.normal(size=(5, 6))
    G = rng.normal(size=(5, 6))
    rep = Replica(branch, 0, 0, 6, 0, params, None, make_node_batches(g, batch_size, 0),
                  centered=branch > 0, pipeline=False)
    rep.forward(X, mc)
    grads = rep.backward(G)
    arrays = params.arrays()
    for name, arr in arrays.items():
        def f(values, name=name):
            saved = arrays[name].copy()
            arrays[name][...] = values
            out = rep.forward(X, mc)
            arrays[name][...] = saved
            return float(np.sum(G * out))

        numeric = oracles.central_difference(f, arr.copy(), 1e-6)
        assert np.allclose(grads[name], numeric, rtol=1e-5, atol=1e-7), name
