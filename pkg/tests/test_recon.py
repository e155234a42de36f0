import csv

import numpy as np
import pytest

from dlrecon.neural import NetworkSpec, TrainConfig, forward, init_network
from dlrecon.phantom import generate_phantom, rasterize
from dlrecon.projector import apply
from dlrecon.recon import (
    ReconConfig,
    ReconstructionOperator,
    apply_q,
    reconstruct,
    single_pass,
    stage1_inputs,
    stage2_pairs,
    train_stage1,
    train_stage2,
)
from dlrecon.solvers import SolverConfig, solve_ls_nn


@pytest.fixture(scope="module")
def desk(small_H):
    truths = [rasterize(generate_phantom(s), 16) for s in range(50)]
    return truths, [apply(small_H, f) for f in truths]


def random_net(seed=0):
    return init_network(NetworkSpec(depth=3, width=4), seed)


def zero_net():
    net = random_net()
    for p in net.params:
        p[...] = 0
    return net


def test_config_validation():
    for bad in (dict(n_outer=0), dict(n_collect=0), dict(r_operator="cg"), dict(stage2_inputs="x")):
        with pytest.raises(ValueError):
            ReconConfig(**bad)


def test_pinv_operator_needs_factors(small_H):
    g = np.zeros(small_H.geometry.shape)
    with pytest.raises(ValueError):
        ReconstructionOperator(small_H, g, ReconConfig())
    with pytest.raises(ValueError):
        ReconstructionOperator(small_H, np.zeros(5), ReconConfig(r_operator="gradient_step"))


@pytest.mark.parametrize("r_operator", ["ls_pinv", "ls_nn_pgd"])
def test_single_iteration_is_single_pass(small_H, small_factors, desk, r_operator):
    g = desk[1][0]
    cfg = ReconConfig(r_operator=r_operator, solver=SolverConfig(max_iters=50))
    net = random_net()
    out, trace = reconstruct(g, small_H, net, cfg, small_factors, n_outer=1)
    r0, _ = ReconstructionOperator(small_H, g, cfg, small_factors)(np.zeros((16, 16)))
    assert np.array_equal(out, forward(net, r0))
    assert np.array_equal(out, single_pass(g, small_H, net, cfg, small_factors))
    assert len(trace) == 1


def test_identity_q_gives_ls_fixed_point(small_H, small_factors, desk):
    g = desk[1][3]
    out, trace = reconstruct(g, small_H, zero_net(), ReconConfig(n_outer=5), small_factors)
    ls = small_factors.pseudoinverse() @ g.ravel()
    for rec in trace:
        assert np.allclose(rec.f_R.ravel(), ls, atol=1e-12)
        assert np.array_equal(rec.f_Q, rec.f_R)
    assert np.allclose(out.ravel(), ls, atol=1e-12)


def test_clamp_q_with_gradient_step_is_projected_gradient(small_H, desk):
    g = desk[1][5] + 0.01
    steps = 50
    solver = SolverConfig(max_iters=steps, rel_change_tol=0.0)
    iterates = []
    solve_ls_nn(small_H, g, config=solver, callback=lambda k, f: iterates.append(f.copy()))
    cfg = ReconConfig(n_outer=steps, r_operator="gradient_step", solver=solver)
    _, trace = reconstruct(g, small_H, lambda f: np.maximum(f, 0.0), cfg)
    assert len(iterates) == steps
    for rec, ref in zip(trace, iterates):
        assert np.array_equal(rec.f_Q, ref)


def test_trace_metrics_and_csv(tmp_path, small_H, small_factors, desk):
    truth, g = desk[0][2], desk[1][2]
    _, trace = reconstruct(g, small_H, random_net(), ReconConfig(n_outer=3), small_factors, truth=truth,
                           keep_images=False)
    assert trace[0].f_R is None
    # the pseudoinverse step restores the measurable component on inverse-crime data
    assert np.all(trace.column("rmse_meas_R") < 1e-10)
    assert np.all(np.isfinite(trace.column("rmse_null_Q")))
    trace.write_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["k", "rmse_meas_R", "rmse_meas_Q", "rmse_null_Q"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert float(rows[2][3]) == trace[1].rmse_null_Q


def test_invalid_outer_count(small_H, small_factors, desk):
    with pytest.raises(ValueError):
        reconstruct(desk[1][0], small_H, zero_net(), ReconConfig(), small_factors, n_outer=0)


def test_apply_q_accepts_callables():
    f = np.arange(4.0).reshape(2, 2)
    assert np.array_equal(apply_q(lambda x: 2 * x, f), 2 * f)


def test_stage1_inputs_are_measurable_parts(small_H, small_factors, desk):
    truths, sinos = desk
    inputs = stage1_inputs(sinos[:5], small_H, ReconConfig(), small_factors)
    for x, f in zip(inputs, truths):
        assert np.allclose(x, small_factors.projectors.project_measurable(f), atol=1e-10)


def test_stage1_training_decreases_loss(small_H, small_factors, desk):
    truths, sinos = desk
    tc = TrainConfig(learning_rate=1e-3, batch_size=8, iterations=40, seed=0)
    a = train_stage1(truths, sinos, small_H, NetworkSpec(depth=3, width=8), tc, ReconConfig(), small_factors)
    assert np.mean(a.loss_history[-5:]) < np.mean(a.loss_history[:5])
    assert a.metadata["stage"] == 1 and a.metadata["pairs"] == 50
    b = train_stage1(truths, sinos, small_H, NetworkSpec(depth=3, width=8), tc, ReconConfig(), small_factors)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    with pytest.raises(ValueError):
        train_stage1([], [], small_H, NetworkSpec(depth=3, width=8), tc, ReconConfig(), small_factors)


def test_stage2_pairs(small_H, small_factors, desk):
    truths, sinos = desk
    cfg = ReconConfig(n_collect=4)
    net = random_net()
    inputs, targets = stage2_pairs(net, truths[:6], sinos[:6], small_H, cfg, small_factors)
    assert len(inputs) == len(targets) == 6 * 4
    first = stage1_inputs(sinos[:6], small_H, cfg, small_factors)
    for i in range(6):
        assert np.array_equal(inputs[4 * i], first[i])
        assert all(t is truths[i] for t in targets[4 * i:4 * i + 4])


def test_stage2_fine_tunes_a_copy(small_H, small_factors, desk):
    truths, sinos = desk
    tc = TrainConfig(learning_rate=1e-3, batch_size=8, iterations=5)
    net1 = random_net()
    before = [p.copy() for p in net1.params]
    net2 = train_stage2(net1, truths[:8], sinos[:8], small_H, ReconConfig(n_collect=2), tc, small_factors)
    assert all(np.array_equal(p, q) for p, q in zip(net1.params, before))
    assert net2.adam_t == 5 and net2.metadata["pairs"] == 16 and net2.metadata["stage"] == 2
