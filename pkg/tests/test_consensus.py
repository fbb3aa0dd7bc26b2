import numpy as np
import pytest

from admmprune.consensus import (
    ConsensusSettings,
    ConsensusState,
    LayerResiduals,
    PenaltySchedule,
    ResidualReport,
    adapt_penalties,
    build_residual_report,
    dual_update_intra,
    freeze_check,
    load_checkpoint,
    node_candidate,
    pack_report,
    run_hierarchical,
    save_checkpoint,
    unpack_report,
    update_node_consensus,
)
from admmprune.errors import ConfigError, ProtocolError
from admmprune.sparsity import ConstraintKind, SparsityConstraint, extract_mask, project
from admmprune.tensors import LayerKind, LayerSpec
from admmprune.transport import Cluster, Topology
from admmprune.workloads import SolverConfig, build_quadratic, build_tinyconv, centralized_quadratic_optimum


def test_node_candidate_normalizer_arithmetic():
    # gamma = wd/M + P*rho1 + rho2 = 5e-5 + 3e-3 + 1.5e-4 = 3.2e-3
    s = np.full((1, 4), 2.0)
    z = np.zeros((1, 4))
    v = np.zeros((1, 4))
    out = node_candidate(s, z, v, rho1=1.5e-3, rho2=1.5e-4, weight_decay=1e-4,
                         num_nodes=2, accels_per_node=2)
    gamma = 1e-4 / 2 + 2 * 1.5e-3 + 1.5e-4
    assert gamma == pytest.approx(3.2e-3, rel=1e-12)
    np.testing.assert_allclose(out, (1.5e-3 * s) / gamma)


def test_node_candidate_degenerate_weights_is_local():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(2, 3))  # sum over P=1 worker of theta + u
    out = node_candidate(s, np.zeros((2, 3)), np.zeros((2, 3)),
                         rho1=0.7, rho2=0.0, weight_decay=0.0, num_nodes=3, accels_per_node=1)
    np.testing.assert_allclose(out, s)


def test_node_candidate_equal_inputs_scaling():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(2, 2))
    rho1, rho2, wd, m, p = 0.3, 0.1, 0.01, 2, 4
    gamma = wd / m + p * rho1 + rho2
    out = node_candidate(p * t, t, np.zeros_like(t), rho1, rho2, wd, m, p)
    np.testing.assert_allclose(out, ((p * rho1 + rho2) / gamma) * t)


def test_node_candidate_rejects_nonpositive_gamma():
    with pytest.raises(ConfigError):
        node_candidate(np.ones(2), np.ones(2), np.ones(2), rho1=0.0, rho2=0.0,
                       weight_decay=0.0, num_nodes=1, accels_per_node=1)


def test_update_node_consensus_frozen_all_ones():
    rng = np.random.default_rng(2)
    cand = rng.normal(size=(2, 2, 1, 1))
    cons = [SparsityConstraint(ConstraintKind.FILTER_KEEP, keep_count=1)]
    z, mask = update_node_consensus(cand, cons, frozen=True, global_mask=np.ones(cand.shape, bool))
    assert np.array_equal(z, cand)
    assert mask is None


def test_update_node_consensus_dynamic_unconstrained():
    rng = np.random.default_rng(3)
    cand = rng.normal(size=(2, 3))
    z, mask = update_node_consensus(cand, [], frozen=False, global_mask=None)
    assert np.array_equal(z, cand)
    assert mask.all()


def test_update_node_consensus_dynamic_matches_projection():
    rng = np.random.default_rng(4)
    cand = rng.normal(size=(4, 3, 2, 2))
    cons = [SparsityConstraint(ConstraintKind.FILTER_KEEP, keep_count=2)]
    z, mask = update_node_consensus(cand, cons, frozen=False, global_mask=None)
    expected = project(cand, cons[0])
    assert np.array_equal(z, expected)
    assert np.array_equal(mask, extract_mask(expected))


def test_update_node_consensus_frozen_without_mask_is_protocol_error():
    cons = [SparsityConstraint(ConstraintKind.FILTER_KEEP, keep_count=1)]
    with pytest.raises(ProtocolError):
        update_node_consensus(np.ones((2, 2, 1, 1)), cons, frozen=True, global_mask=None)


def test_dual_update_intra():
    theta = np.array([1.0, 2.0])
    z = np.array([1.0, 2.0])
    u = np.array([0.5, -0.5])
    assert np.array_equal(dual_update_intra(theta, z, u), u)

    d = np.array([0.25, -1.0])
    assert np.array_equal(dual_update_intra(z + d, z, np.zeros(2)), d)

    acc = np.zeros(2)
    for _ in range(5):
        acc = dual_update_intra(z + d, z, acc)
    np.testing.assert_allclose(acc, 5 * d)


def _report(r_intra=1.0, s_intra=1.0, r_inter=1.0, s_inter=1.0):
    lr = LayerResiduals(r_intra, s_intra, r_inter, s_inter, 1, 1, 1, 1)
    return ResidualReport({"x": lr}, r_intra, s_intra, 1, 1, False)


def _sched(rho1=1.0, rho2=1.0, **kw):
    return PenaltySchedule({"x": rho1}, {"x": rho2}, **kw)


def test_adapt_penalties_balanced_unchanged():
    sched, u_scale, v_scale = adapt_penalties(_report(), _sched())
    assert sched.rho1["x"] == 1.0 and sched.rho2["x"] == 1.0
    assert u_scale["x"] == 1.0 and v_scale["x"] == 1.0


def test_adapt_penalties_boundary_is_strict():
    sched, _, _ = adapt_penalties(_report(r_intra=10.0, s_intra=1.0), _sched(rho1=1.0))
    assert sched.rho1["x"] == 1.0  # exactly mu times: unchanged


def test_adapt_penalties_cap():
    sched, u_scale, _ = adapt_penalties(
        _report(r_intra=100.0, s_intra=1.0), _sched(rho1=8.0, rho1_max=10.0)
    )
    assert sched.rho1["x"] == 10.0
    assert u_scale["x"] == pytest.approx(0.8)


def test_adapt_penalties_decrease_rescales_dual():
    sched, u_scale, v_scale = adapt_penalties(
        _report(r_intra=1.0, s_intra=100.0, r_inter=1.0, s_inter=100.0), _sched(rho1=4.0, rho2=2.0)
    )
    assert sched.rho1["x"] == 2.0
    assert u_scale["x"] == 2.0
    assert sched.rho2["x"] == 1.0
    assert v_scale["x"] == 2.0


def test_adapt_penalties_zero_rho2_stays_zero():
    sched, _, v_scale = adapt_penalties(_report(r_inter=5.0, s_inter=0.0), _sched(rho2=0.0))
    assert sched.rho2["x"] == 0.0
    assert v_scale["x"] == 1.0


def test_freeze_check():
    assert freeze_check(10, 10, [], window=3)
    assert freeze_check(11, 10, [], window=3)
    assert not freeze_check(3, 10, [0.1], window=3)
    assert not freeze_check(3, 10, [0.0, 0.0], window=3)
    assert freeze_check(4, 10, [0.5, 0.0, 0.0, 0.0], window=3)
    assert not freeze_check(4, 10, [0.0, 0.0, 0.1], window=3)


def test_penalty_schedule_validation():
    with pytest.raises(ConfigError):
        PenaltySchedule({"x": 0.0}, {"x": 0.1})
    with pytest.raises(ConfigError):
        PenaltySchedule({"x": 11.0}, {"x": 0.1}, rho1_max=10.0)
    PenaltySchedule({"x": 1.0}, {"x": 0.0})  # zero inter coupling is allowed


def test_residual_report_exact_consensus_is_zero():
    layers = [LayerSpec("x", LayerKind.FULLY_CONNECTED, (1, 4))]
    sched = PenaltySchedule.uniform(["x"], 1.0, 1.0)
    sums = np.zeros(9)
    report = build_residual_report(layers, sums, sched, 2, 2, eps_abs=1e-4, eps_rel=1e-3)
    lr = report.layers["x"]
    assert lr.r_intra == lr.s_intra == lr.r_inter == lr.s_inter == 0.0
    assert report.converged
    assert report.eps_pri > 0.0


def test_residual_report_pack_roundtrip():
    layers = [LayerSpec("a", LayerKind.FULLY_CONNECTED, (1, 4)),
              LayerSpec("b", LayerKind.FULLY_CONNECTED, (2, 2))]
    sched = PenaltySchedule.uniform(["a", "b"], 0.5, 0.25)
    sums = np.abs(np.random.default_rng(0).normal(size=18))
    report = build_residual_report(layers, sums, sched, 2, 3, 1e-4, 1e-3)
    vec = pack_report(report, ["a", "b"])
    back = unpack_report(vec, ["a", "b"])
    assert back == report


def _quadratic_cluster(nodes=2, per_node=1, dim=8, rows=32, seed=3):
    topo = Topology(nodes, per_node)
    cluster = Cluster(topo)
    workload = build_quadratic(dim, rows, topo.world_size, seed)
    return cluster, workload


def test_dense_mode_matches_normal_equations_oracle():
    cluster, workload = _quadratic_cluster(nodes=2, per_node=1)
    sched = PenaltySchedule.uniform(["x"], 1.5e-3, 1.5e-4)
    solver = SolverConfig(lr=0.01, epochs=25, batch_size=32, momentum=0.0, weight_decay=0.0)
    settings = ConsensusSettings(iterations=200, t_freeze=10_000, eps_abs=1e-8, eps_rel=1e-8,
                                 weight_decay=0.0, seed=3)
    results = run_hierarchical(cluster, workload, {}, sched, solver, settings)
    opt = centralized_quadratic_optimum(workload, weight_decay=0.0)
    z = results[0].state.z["x"]
    assert np.linalg.norm(z - opt) / np.linalg.norm(opt) <= 1e-4
    assert results[0].converged_at is not None
    assert results[0].converged_at <= 200
    # fixed point: theta == z_node == z on every rank
    for r, res in results.items():
        assert np.allclose(res.state.theta["x"], z, atol=1e-5)


def test_residuals_non_increasing_late_in_run():
    cluster, workload = _quadratic_cluster(nodes=2, per_node=2, dim=10, rows=16, seed=5)
    sched = PenaltySchedule.uniform(["x"], 1.5e-3, 1.5e-4)
    solver = SolverConfig(lr=0.01, epochs=10, batch_size=16, momentum=0.0, weight_decay=0.0)
    settings = ConsensusSettings(iterations=50, t_freeze=10_000, stop_on_convergence=False,
                                 weight_decay=0.0, seed=5)
    results = run_hierarchical(cluster, workload, {}, sched, solver, settings)
    r_pri = [row["report"].r_pri for row in results[0].trace]
    for a, b in zip(r_pri[-10:], r_pri[-9:]):
        assert b <= a * 1.05


def test_mask_union_via_leaders():
    # two nodes projecting different filters: the union covers both supports
    topo = Topology(2, 1)
    cluster = Cluster(topo)
    workload = build_tinyconv(8, 2, seed=21, input_channels=4, conv_filters=4)
    constraints = {"conv1": [SparsityConstraint(ConstraintKind.CHANNEL_KEEP, keep_rate=0.5)]}
    sched = PenaltySchedule.uniform([ls.name for ls in workload.layers], 1.5e-3, 1.5e-4)
    solver = SolverConfig(lr=0.01, epochs=2, batch_size=8, momentum=0.0, weight_decay=1e-4)
    settings = ConsensusSettings(iterations=2, t_freeze=50, stop_on_convergence=False, seed=21)
    results = run_hierarchical(cluster, workload, constraints, sched, solver, settings)
    m0 = results[0].state.masks["conv1"]
    m1 = results[1].state.masks["conv1"]
    assert np.array_equal(m0, m1)
    # union popcount at least the per-node keep amount
    assert m0.sum() >= 4 * 2 * 9


def test_support_containment_in_both_modes():
    topo = Topology(2, 1)
    cluster = Cluster(topo)
    workload = build_tinyconv(8, 2, seed=22, input_channels=4, conv_filters=4, init_kind="pretrained")
    constraints = {"conv1": [SparsityConstraint(ConstraintKind.CHANNEL_KEEP, keep_rate=0.5)]}
    sched = PenaltySchedule.uniform([ls.name for ls in workload.layers], 1.5e-3, 1.5e-4)
    solver = SolverConfig(lr=0.02, epochs=3, batch_size=8, momentum=0.9, weight_decay=1e-4)
    settings = ConsensusSettings(iterations=10, t_freeze=6, stop_on_convergence=False, seed=22)
    results = run_hierarchical(cluster, workload, constraints, sched, solver, settings,
                               capture_states=True)
    for res in results.values():
        frozen_mask = res.state.masks["conv1"]
        for row in res.trace:
            zn = row["z_node_copy"]["conv1"]
            support = extract_mask(zn)
            if row["frozen"]:
                assert not np.any(support & ~frozen_mask)
            else:
                # dynamic supports respect the per-node keep budget
                channels = support.any(axis=(0, 2, 3)).sum()
                assert channels <= 2


def test_dual_bookkeeping_recurrence():
    cluster, workload = _quadratic_cluster(nodes=2, per_node=2, dim=6, rows=8, seed=7)
    sched = PenaltySchedule.uniform(["x"], 1e-2, 1e-3)
    solver = SolverConfig(lr=0.01, epochs=3, batch_size=8, momentum=0.9, weight_decay=0.0)
    settings = ConsensusSettings(iterations=8, stop_on_convergence=False, weight_decay=0.0, seed=7)
    results = run_hierarchical(cluster, workload, {}, sched, solver, settings, capture_states=True)
    for res in results.values():
        u_rec = np.zeros((1, 6))
        for row in res.trace:
            u_rec = u_rec + (row["theta_copy"]["x"] - row["z_node_copy"]["x"])
            u_rec = u_rec * row["u_scale"]["x"]
        assert np.array_equal(u_rec, res.state.u["x"])


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    state = ConsensusState(
        rank=1, iteration=4, frozen=True,
        theta={"a": rng.normal(size=(2, 3))}, u={"a": rng.normal(size=(2, 3))},
        z_node={"a": rng.normal(size=(2, 3))}, v={"a": rng.normal(size=(2, 3))},
        z={"a": rng.normal(size=(2, 3))},
        masks={"a": rng.normal(size=(2, 3)) > 0},
        schedule=PenaltySchedule({"a": 0.5}, {"a": 0.25}, mu=5.0, adapt=False),
    )
    path = tmp_path / "ckpt.npz"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    assert loaded.rank == 1 and loaded.iteration == 4 and loaded.frozen
    assert loaded.schedule == state.schedule
    for group in ("theta", "u", "z_node", "v", "z"):
        assert np.array_equal(getattr(loaded, group)["a"], getattr(state, group)["a"])
    assert np.array_equal(loaded.masks["a"], state.masks["a"])
    assert loaded.masks["a"].dtype == np.bool_
