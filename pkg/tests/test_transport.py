import logging

import numpy as np
import pytest

from admmprune.errors import ProtocolError, ShapeError
from admmprune.transport import (
    AllGather,
    AllReduce,
    Broadcast,
    Cluster,
    GroupScope,
    LatencyModel,
    ProcessGroup,
    ReduceOp,
    Topology,
    bucketize,
    iteration_latency,
    read_ledger_jsonl,
    unbucketize,
)

from oracles import serial_fold_or, serial_fold_sum


def test_topology_ranks_and_leaders():
    topo = Topology(3, 4)
    assert topo.world_size == 12
    assert topo.node_of(7) == 1
    assert topo.local_rank(7) == 3
    assert topo.leaders == (0, 4, 8)
    assert topo.is_leader(4) and not topo.is_leader(5)
    with pytest.raises(ShapeError):
        Topology(0, 2)


def test_group_membership():
    cluster = Cluster(Topology(2, 3))
    assert cluster.intra_group(1).members == (3, 4, 5)
    assert cluster.leader_group().members == (0, 3)
    assert cluster.global_group().members == (0, 1, 2, 3, 4, 5)
    assert cluster.intra_group(0).scope is GroupScope.INTRA
    assert cluster.leader_group().scope is GroupScope.INTER


def _single_collective(cluster, group, make_call):
    def program(rank):
        result = yield make_call(rank)
        return result

    return cluster.run({r: program(r) for r in group.members})


def test_allreduce_avg_example():
    cluster = Cluster(Topology(1, 2))
    group = cluster.intra_group(0)
    payloads = {0: np.array([1.0]), 1: np.array([3.0])}
    out = _single_collective(
        cluster, group, lambda r: AllReduce(group, payloads[r], ReduceOp.AVG, "t", 1)
    )
    assert np.array_equal(out[0], [2.0])
    assert np.array_equal(out[1], [2.0])


def test_allreduce_bitwise_or_example():
    cluster = Cluster(Topology(3, 1))
    group = cluster.leader_group()
    bits = {0: np.array([1, 0, 1], dtype=bool), 1: np.array([0, 0, 1], dtype=bool),
            2: np.array([0, 0, 0], dtype=bool)}
    out = _single_collective(
        cluster, group, lambda r: AllReduce(group, bits[r], ReduceOp.BITWISE_OR, "m", 1)
    )
    assert np.array_equal(out[0], [True, False, True])


@pytest.mark.parametrize("size", [2, 3, 5, 8, 16])
def test_allreduce_sum_matches_serial_fold(size):
    rng = np.random.default_rng(size)
    cluster = Cluster(Topology(1, size))
    group = cluster.intra_group(0)
    payloads = {r: rng.normal(size=13) for r in range(size)}
    out = _single_collective(
        cluster, group, lambda r: AllReduce(group, payloads[r], ReduceOp.SUM, "s", 1)
    )
    expected = serial_fold_sum([payloads[r] for r in range(size)])
    for r in range(size):
        assert np.array_equal(out[r], expected)


def test_broadcast_identity_and_copies():
    cluster = Cluster(Topology(1, 5))
    group = cluster.intra_group(0)
    payload = np.arange(4.0)

    def program(rank):
        got = yield Broadcast(group, 0, payload if rank == 0 else None, "b", 1)
        return got

    out = cluster.run({r: program(r) for r in range(5)})
    for r in range(5):
        assert np.array_equal(out[r], payload)
    out[1][0] = 99.0  # results are value copies
    assert out[2][0] == 0.0
    entry = cluster.ledger.entries[-1]
    assert entry.op == "broadcast"
    assert entry.bytes == payload.size * 4 * (5 - 1)


def test_single_member_broadcast_logs_nothing():
    cluster = Cluster(Topology(1, 1))
    group = cluster.intra_group(0)

    def program():
        got = yield Broadcast(group, 0, np.ones(3), "b", 1)
        return got

    out = cluster.run({0: program()})
    assert np.array_equal(out[0], np.ones(3))
    assert cluster.ledger.entries == []


def test_allgather_returns_rank_order():
    cluster = Cluster(Topology(1, 3))
    group = cluster.intra_group(0)
    payloads = {r: np.full(2, float(r)) for r in range(3)}

    def program(rank):
        got = yield AllGather(group, payloads[rank], "g", 1)
        return got

    out = cluster.run({r: program(r) for r in range(3)})
    for r in range(3):
        assert [a[0] for a in out[r]] == [0.0, 1.0, 2.0]


def test_shape_mismatch_is_protocol_error():
    cluster = Cluster(Topology(1, 2))
    group = cluster.intra_group(0)
    shapes = {0: 3, 1: 4}
    with pytest.raises(ProtocolError, match="shapes disagree"):
        _single_collective(
            cluster, group,
            lambda r: AllReduce(group, np.ones(shapes[r]), ReduceOp.SUM, "s", 1),
        )


def test_bitwise_or_on_floats_is_type_error():
    cluster = Cluster(Topology(1, 2))
    group = cluster.intra_group(0)
    with pytest.raises(TypeError):
        _single_collective(
            cluster, group,
            lambda r: AllReduce(group, np.ones(3), ReduceOp.BITWISE_OR, "m", 1),
        )


def test_sum_requires_float64():
    cluster = Cluster(Topology(1, 2))
    group = cluster.intra_group(0)
    with pytest.raises(TypeError):
        _single_collective(
            cluster, group,
            lambda r: AllReduce(group, np.ones(3, dtype=np.float32), ReduceOp.SUM, "s", 1),
        )


def test_broadcast_root_outside_group():
    cluster = Cluster(Topology(2, 2))
    group = cluster.intra_group(0)

    def program(rank):
        yield Broadcast(group, 3, None, "b", 1)

    with pytest.raises(ProtocolError, match="root"):
        cluster.run({r: program(r) for r in (0, 1)})


def test_missing_member_deadlocks():
    cluster = Cluster(Topology(1, 2))
    group = cluster.intra_group(0)

    def participates(rank):
        got = yield AllReduce(group, np.ones(2), ReduceOp.SUM, "s", 1)
        return got

    def exits_early(rank):
        return
        yield  # pragma: no cover

    with pytest.raises(ProtocolError, match="deadlock"):
        cluster.run({0: participates(0), 1: exits_early(1)})


def test_mismatched_program_points_deadlock():
    cluster = Cluster(Topology(1, 2))
    group = cluster.intra_group(0)

    def two_calls(rank):
        yield AllReduce(group, np.ones(1), ReduceOp.SUM, "first", 1)
        yield AllReduce(group, np.ones(1), ReduceOp.SUM, "second", 1)

    def one_call(rank):
        yield AllReduce(group, np.ones(1), ReduceOp.SUM, "first", 1)

    with pytest.raises(ProtocolError, match="deadlock"):
        cluster.run({0: two_calls(0), 1: one_call(1)})


def test_tag_mismatch_is_protocol_error():
    cluster = Cluster(Topology(1, 2))
    group = cluster.intra_group(0)
    tags = {0: "a", 1: "b"}
    with pytest.raises(ProtocolError, match="mismatched"):
        _single_collective(
            cluster, group,
            lambda r: AllReduce(group, np.ones(1), ReduceOp.SUM, tags[r], 1),
        )


def test_non_member_cannot_post():
    cluster = Cluster(Topology(2, 2))
    group = cluster.intra_group(0)

    def program(rank):
        yield AllReduce(group, np.ones(1), ReduceOp.SUM, "s", 1)

    with pytest.raises(ProtocolError, match="not a member"):
        cluster.run({2: program(2)})


def test_collective_determinism():
    def run_once():
        cluster = Cluster(Topology(2, 2))
        rng = np.random.default_rng(0)
        payloads = {r: rng.normal(size=8) for r in range(4)}
        group = cluster.global_group()
        out = _single_collective(
            cluster, group, lambda r: AllReduce(group, payloads[r], ReduceOp.SUM, "s", 1)
        )
        return out[0].tobytes(), [e.to_dict() for e in cluster.ledger.entries]

    assert run_once() == run_once()


# -- bucketing ----------------------------------------------------------------


def test_bucketize_empty():
    assert bucketize([]) == []


def test_bucketize_single_small_tensor():
    buckets = bucketize([("a", np.ones(256))])
    assert len(buckets) == 1
    assert buckets[0].layout == (("a", 0, 256),)


def test_bucketize_greedy_packing():
    # 4-byte accounting: sizes below are bytes with cap 32 "MiB-like" units
    cap = 32 * 100
    mib20 = np.ones(20 * 100 // 4)
    mib1 = np.ones(100 // 4)
    buckets = bucketize([("a", mib20), ("b", mib20), ("c", mib1)], cap_bytes=cap)
    assert [tuple(name for name, _, _ in b.layout) for b in buckets] == [("a",), ("b", "c")]


def test_bucketize_never_splits_and_warns_on_oversize(caplog):
    cap = 100
    big = np.ones(50)  # 200 bytes > cap
    with caplog.at_level(logging.WARNING):
        buckets = bucketize([("big", big), ("small", np.ones(10))], cap_bytes=cap)
    assert len(buckets) == 2
    assert buckets[0].layout[0][0] == "big"
    assert buckets[0].buffer.size == 50
    assert any("exceeds bucket cap" in rec.message for rec in caplog.records)


def test_bucket_concatenation_roundtrip():
    rng = np.random.default_rng(1)
    named = [(f"t{i}", rng.normal(size=rng.integers(1, 40))) for i in range(10)]
    buckets = bucketize(named, cap_bytes=256)
    flat = np.concatenate([b.buffer for b in buckets])
    assert np.array_equal(flat, np.concatenate([a.ravel() for _, a in named]))
    recovered = {}
    for b in buckets:
        recovered.update(unbucketize(b, b.buffer))
    for name, arr in named:
        assert np.array_equal(recovered[name], arr.ravel())


def test_ledger_jsonl_roundtrip(tmp_path):
    cluster = Cluster(Topology(1, 2))
    group = cluster.intra_group(0)
    _single_collective(cluster, group, lambda r: AllReduce(group, np.ones(7), ReduceOp.SUM, "x", 3))
    path = tmp_path / "ledger.jsonl"
    cluster.ledger.to_jsonl(path)
    rows = read_ledger_jsonl(path)
    assert rows == [{
        "iter": 3, "group": "intra0", "scope": "intra", "op": "allreduce_sum",
        "elements": 7, "bytes": 28, "members": 2, "label": "x",
    }]


def test_latency_model_scopes():
    model = LatencyModel(alpha_intra=1e-6, beta_intra=1e9, alpha_inter=1e-4, beta_inter=1e7)
    assert model.time("intra", 1000) == pytest.approx(1e-6 + 1e-6)
    assert model.time("inter", 1000) == pytest.approx(1e-4 + 1e-4)
    assert model.time("global", 1000) == model.time("inter", 1000)


def test_iteration_latency_accumulates():
    cluster = Cluster(Topology(2, 2))
    group = cluster.leader_group()
    _single_collective(cluster, group, lambda r: AllReduce(group, np.ones(10), ReduceOp.SUM, "x", 1))
    lat = iteration_latency(cluster.ledger.entries, cluster.latency)
    assert lat["inter"] > 0.0
