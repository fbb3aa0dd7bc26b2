"""Two-level consensus training with node-level structured-sparsity projection.

Each outer iteration runs: local proximal SGD on every rank, an intra-node
sum of (theta + u), a node candidate update followed by projection (or a
frozen-mask multiply), a leader-only inter-node average on physically shrunk
buffers, dual updates, residual aggregation, and adaptive penalty tuning.

Mask handling: the compact transfer for iteration k uses the global mask
agreed at the end of iteration k-1 (initially all-ones, so the first
exchange is dense); the bitwise-or union of this iteration's local masks is
synchronized afterwards and takes effect next iteration. Once masks stop
drifting (or a freeze iteration is reached) the union is frozen, keep sets
are cached once, and payload shapes stay constant.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ProtocolError
from .shrinkage import CompactBuffer, KeepSetCache, compress, decompress
from .sparsity import SparsityConstraint, extract_mask, mask_drift, project_composite
from .tensors import LayerSpec
from .transport import (
    AllReduce,
    Broadcast,
    Cluster,
    ReduceOp,
    bucketize,
    unbucketize,
)
from .workloads import Params, SolverConfig, Workload, batch_rng, init_rng, proximal_sgd

Constraints = dict[str, list[SparsityConstraint]]


@dataclass(frozen=True)
class PenaltySchedule:
    """Layer-wise penalty parameters for the two consensus levels."""

    rho1: dict[str, float]
    rho2: dict[str, float]
    rho1_max: float = 10.0
    rho2_max: float = 10.0
    mu: float = 10.0
    tau_inc: float = 2.0
    tau_dec: float = 2.0
    adapt: bool = True

    def __post_init__(self):
        for name, value in self.rho1.items():
            if not (0.0 < value <= self.rho1_max):
                raise ConfigError(f"rho1[{name}]={value} outside (0, {self.rho1_max}]")
        for name, value in self.rho2.items():
            if not (0.0 <= value <= self.rho2_max):
                raise ConfigError(f"rho2[{name}]={value} outside [0, {self.rho2_max}]")

    @classmethod
    def uniform(cls, layer_names, rho1: float, rho2: float, **kwargs) -> "PenaltySchedule":
        return cls(
            rho1={name: float(rho1) for name in layer_names},
            rho2={name: float(rho2) for name in layer_names},
            **kwargs,
        )


@dataclass(frozen=True)
class LayerResiduals:
    r_intra: float
    s_intra: float
    r_inter: float
    s_inter: float
    eps_pri_intra: float
    eps_dual_intra: float
    eps_pri_inter: float
    eps_dual_inter: float


@dataclass(frozen=True)
class ResidualReport:
    layers: dict[str, LayerResiduals]
    r_pri: float
    r_dual: float
    eps_pri: float
    eps_dual: float
    converged: bool


@dataclass(frozen=True)
class ConsensusSettings:
    iterations: int
    t_freeze: int = 10
    drift_window: int = 3
    sync_period: int = 1
    eps_abs: float = 1e-4
    eps_rel: float = 1e-3
    stop_on_convergence: bool = True
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.sync_period < 1:
            raise ConfigError("sync_period must be at least 1")


@dataclass
class ConsensusState:
    """Per-rank fragment of the optimization state."""

    rank: int
    iteration: int
    frozen: bool
    theta: Params
    u: Params
    z_node: Params
    v: Params
    z: Params
    masks: dict[str, np.ndarray]
    schedule: PenaltySchedule


@dataclass
class RankResult:
    rank: int
    state: ConsensusState
    trace: list[dict]
    converged_at: int | None
    cache_derive: int
    cache_hits: int


# -- update rules -------------------------------------------------------------


def node_candidate(
    sum_theta_u: np.ndarray,
    z_global: np.ndarray,
    v: np.ndarray,
    rho1: float,
    rho2: float,
    weight_decay: float,
    num_nodes: int,
    accels_per_node: int,
) -> np.ndarray:
    """Dense node-consensus candidate: weighted mix of local sum and global pull.

    ``(rho1 * sum_j(theta_j + u_j) + rho2 * (z - v)) / gamma`` with
    ``gamma = weight_decay / num_nodes + accels_per_node * rho1 + rho2``.
    """
    gamma = weight_decay / num_nodes + accels_per_node * rho1 + rho2
    if gamma <= 0.0:
        raise ConfigError(f"non-positive candidate normalizer gamma={gamma}")
    return (rho1 * sum_theta_u + rho2 * (z_global - v)) / gamma


def update_node_consensus(
    candidate: np.ndarray,
    constraints: list[SparsityConstraint],
    frozen: bool,
    global_mask: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Project the candidate (dynamic) or apply the frozen static mask.

    Returns the node consensus tensor and, while dynamic, the local support
    mask (all-ones when the layer is unconstrained); frozen updates return
    ``None`` for the mask.
    """
    if not constraints:
        return candidate.copy(), (None if frozen else np.ones(candidate.shape, dtype=bool))
    if frozen:
        if global_mask is None:
            raise ProtocolError("frozen update requires a stored global mask")
        return candidate * global_mask, None
    z = project_composite(candidate, constraints)
    return z, extract_mask(z)


def dual_update_intra(theta: np.ndarray, z_node: np.ndarray, u: np.ndarray) -> np.ndarray:
    return u + (theta - z_node)


def adapt_penalties(
    report: ResidualReport, sched: PenaltySchedule
) -> tuple[PenaltySchedule, dict[str, float], dict[str, float]]:
    """Residual balancing per layer and level.

    Grow a penalty (capped) when its primal residual dominates, shrink it
    when the dual residual dominates; both comparisons are strict. Returns
    the new schedule plus per-layer scale factors (old / new) that must be
    applied to the matching scaled duals to keep them consistent.
    """
    rho1 = dict(sched.rho1)
    rho2 = dict(sched.rho2)
    u_scale: dict[str, float] = {}
    v_scale: dict[str, float] = {}
    for name in rho1:
        lr = report.layers[name]
        old = rho1[name]
        if lr.r_intra > sched.mu * lr.s_intra:
            rho1[name] = min(old * sched.tau_inc, sched.rho1_max)
        elif lr.s_intra > sched.mu * lr.r_intra:
            rho1[name] = old / sched.tau_dec
        u_scale[name] = old / rho1[name] if rho1[name] != old else 1.0

        old2 = rho2[name]
        if lr.r_inter > sched.mu * lr.s_inter:
            rho2[name] = min(old2 * sched.tau_inc, sched.rho2_max)
        elif lr.s_inter > sched.mu * lr.r_inter:
            rho2[name] = old2 / sched.tau_dec
        v_scale[name] = old2 / rho2[name] if rho2[name] != old2 else 1.0
    new_sched = replace(sched, rho1=rho1, rho2=rho2)
    return new_sched, u_scale, v_scale


def freeze_check(k: int, t_freeze: int, drift_history: list[float], window: int = 3) -> bool:
    """Freeze when the fixed iteration is reached or drift was zero for a window."""
    if k >= t_freeze:
        return True
    if window > 0 and len(drift_history) >= window:
        return all(d == 0.0 for d in drift_history[-window:])
    return False


# -- residual aggregation ------------------------------------------------------

# per-layer slots in the leader-level sum: [r_intra^2, theta^2, u^2, r_inter^2,
#   dz_node^2, z_node^2, v^2, dz^2, z^2]
_INTER_SLOTS = 9
_REPORT_SLOTS = 8


def build_residual_report(
    layer_specs: list[LayerSpec],
    global_sums: np.ndarray,
    sched: PenaltySchedule,
    num_nodes: int,
    accels_per_node: int,
    eps_abs: float,
    eps_rel: float,
) -> ResidualReport:
    """Turn globally summed squared norms into layer residuals and thresholds."""
    world = num_nodes * accels_per_node
    layers: dict[str, LayerResiduals] = {}
    r_pri_sq = r_dual_sq = eps_pri_sq = eps_dual_sq = 0.0
    for li, ls in enumerate(layer_specs):
        g = global_sums[li * _INTER_SLOTS : (li + 1) * _INTER_SLOTS]
        rho1 = sched.rho1[ls.name]
        rho2 = sched.rho2[ls.name]
        n = ls.elements
        r_intra = math.sqrt(g[0])
        s_intra = rho1 * math.sqrt(accels_per_node * g[4])
        r_inter = math.sqrt(g[3])
        s_inter = rho2 * math.sqrt(g[7])
        eps_pri_intra = math.sqrt(n * world) * eps_abs + eps_rel * max(
            math.sqrt(g[1]), math.sqrt(accels_per_node * g[5])
        )
        eps_dual_intra = math.sqrt(n * world) * eps_abs + eps_rel * rho1 * math.sqrt(g[2])
        eps_pri_inter = math.sqrt(n * num_nodes) * eps_abs + eps_rel * max(
            math.sqrt(g[5]), math.sqrt(g[8])
        )
        eps_dual_inter = math.sqrt(n * num_nodes) * eps_abs + eps_rel * rho2 * math.sqrt(g[6])
        layers[ls.name] = LayerResiduals(
            r_intra, s_intra, r_inter, s_inter,
            eps_pri_intra, eps_dual_intra, eps_pri_inter, eps_dual_inter,
        )
        r_pri_sq += r_intra**2 + r_inter**2
        r_dual_sq += s_intra**2 + s_inter**2
        eps_pri_sq += eps_pri_intra**2 + eps_pri_inter**2
        eps_dual_sq += eps_dual_intra**2 + eps_dual_inter**2
    r_pri = math.sqrt(r_pri_sq)
    r_dual = math.sqrt(r_dual_sq)
    eps_pri = math.sqrt(eps_pri_sq)
    eps_dual = math.sqrt(eps_dual_sq)
    return ResidualReport(
        layers=layers,
        r_pri=r_pri,
        r_dual=r_dual,
        eps_pri=eps_pri,
        eps_dual=eps_dual,
        converged=(r_pri <= eps_pri and r_dual <= eps_dual),
    )


def pack_report(report: ResidualReport, layer_names: list[str]) -> np.ndarray:
    vec = np.empty(len(layer_names) * _REPORT_SLOTS + 5, dtype=np.float64)
    for li, name in enumerate(layer_names):
        lr = report.layers[name]
        vec[li * _REPORT_SLOTS : (li + 1) * _REPORT_SLOTS] = (
            lr.r_intra, lr.s_intra, lr.r_inter, lr.s_inter,
            lr.eps_pri_intra, lr.eps_dual_intra, lr.eps_pri_inter, lr.eps_dual_inter,
        )
    vec[-5:] = (report.r_pri, report.r_dual, report.eps_pri, report.eps_dual, float(report.converged))
    return vec


def unpack_report(vec: np.ndarray, layer_names: list[str]) -> ResidualReport:
    layers = {}
    for li, name in enumerate(layer_names):
        vals = vec[li * _REPORT_SLOTS : (li + 1) * _REPORT_SLOTS]
        layers[name] = LayerResiduals(*[float(x) for x in vals])
    r_pri, r_dual, eps_pri, eps_dual, conv = vec[-5:]
    return ResidualReport(layers, float(r_pri), float(r_dual), float(eps_pri), float(eps_dual), bool(conv))


# -- checkpointing -------------------------------------------------------------


def save_checkpoint(state: ConsensusState, path) -> None:
    arrays = {}
    for group_name, params in (
        ("theta", state.theta), ("u", state.u), ("z_node", state.z_node),
        ("v", state.v), ("z", state.z),
    ):
        for name, arr in params.items():
            arrays[f"{group_name}/{name}"] = arr
    for name, mask in state.masks.items():
        arrays[f"mask/{name}"] = mask
    meta = {
        "rank": state.rank,
        "iteration": state.iteration,
        "frozen": state.frozen,
        "schedule": {
            "rho1": state.schedule.rho1,
            "rho2": state.schedule.rho2,
            "rho1_max": state.schedule.rho1_max,
            "rho2_max": state.schedule.rho2_max,
            "mu": state.schedule.mu,
            "tau_inc": state.schedule.tau_inc,
            "tau_dec": state.schedule.tau_dec,
            "adapt": state.schedule.adapt,
        },
    }
    meta_bytes = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, __meta__=meta_bytes, **arrays)


def load_checkpoint(path) -> ConsensusState:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        groups: dict[str, Params] = {"theta": {}, "u": {}, "z_node": {}, "v": {}, "z": {}}
        masks: dict[str, np.ndarray] = {}
        for key in data.files:
            if key == "__meta__":
                continue
            group_name, layer = key.split("/", 1)
            if group_name == "mask":
                masks[layer] = data[key]
            else:
                groups[group_name][layer] = data[key]
    sched = PenaltySchedule(**meta["schedule"])
    return ConsensusState(
        rank=meta["rank"],
        iteration=meta["iteration"],
        frozen=meta["frozen"],
        theta=groups["theta"],
        u=groups["u"],
        z_node=groups["z_node"],
        v=groups["v"],
        z=groups["z"],
        masks=masks,
        schedule=sched,
    )


# -- the hierarchical rank program ---------------------------------------------


def _digest(params: Params, layer_names) -> str:
    h = hashlib.sha256()
    for name in layer_names:
        h.update(params[name].tobytes())
    return h.hexdigest()


def _sq(arr: np.ndarray) -> float:
    return float(np.sum(arr * arr))


def hierarchical_program(
    rank: int,
    cluster: Cluster,
    workload: Workload,
    constraints: Constraints,
    schedule: PenaltySchedule,
    solver: SolverConfig,
    settings: ConsensusSettings,
    capture_states: bool = False,
):
    """Generator program for one rank of the hierarchical consensus run."""
    topo = cluster.topology
    node = topo.node_of(rank)
    intra = cluster.intra_group(node)
    inter = cluster.leader_group()
    leader_rank = topo.leader_of(node)
    is_leader = rank == leader_rank
    num_nodes, per_node = topo.num_nodes, topo.accels_per_node

    layers = workload.layers
    names = [ls.name for ls in layers]
    by_name = {ls.name: ls for ls in layers}
    prunable = [ls for ls in layers if constraints.get(ls.name)]
    shard = workload.shards[rank]
    sched = schedule

    params0 = workload.init_params(init_rng(settings.seed))
    theta = {n: params0[n].copy() for n in names}
    z_node = {n: params0[n].copy() for n in names}
    z = {n: params0[n].copy() for n in names}
    u = {n: np.zeros_like(params0[n]) for n in names}
    v = {n: np.zeros_like(params0[n]) for n in names}
    masks = {ls.name: np.ones(ls.shape, dtype=bool) for ls in prunable}

    cache = KeepSetCache()
    frozen = False
    drift_history: list[float] = []
    trace: list[dict] = []
    converged_at: int | None = None

    for k in range(1, settings.iterations + 1):
        # phase 1: local proximal SGD on this rank's shard
        rng = batch_rng(settings.seed, rank, k)
        theta = proximal_sgd(workload, shard, theta, z_node, u, sched.rho1, solver, rng)
        for n in names:
            if not np.all(np.isfinite(theta[n])):
                raise FloatingPointError(
                    f"rank {rank}, iteration {k}: non-finite values in theta[{n}]"
                )

        # phase 2: intra-node sum of theta + u
        sums = {}
        for n in names:
            sums[n] = yield AllReduce(intra, theta[n] + u[n], ReduceOp.SUM, f"theta_u/{n}", k)

        # phase 3: node candidate, projection or frozen mask
        z_node_prev = z_node
        z_node = {}
        local_masks: dict[str, np.ndarray] = {}
        for ls in layers:
            n = ls.name
            cand = node_candidate(
                sums[n], z[n], v[n], sched.rho1[n], sched.rho2[n],
                settings.weight_decay, num_nodes, per_node,
            )
            zn, m = update_node_consensus(cand, constraints.get(n, []), frozen, masks.get(n))
            z_node[n] = zn
            if m is not None and n in masks:
                local_masks[n] = m

        # phase 4: leaders synchronize the mask union (while dynamic), shrink
        # z_node + v with the fresh union, average compact buffers over the
        # leader group, and broadcast the recovered state to their followers.
        sync_iter = k % settings.sync_period == 0
        drift_now: dict[str, float] = {}
        z_prev = z
        if sync_iter:
            if is_leader:
                new_masks = {}
                if not frozen:
                    for ls in prunable:
                        n = ls.name
                        new_masks[n] = yield AllReduce(
                            inter, local_masks[n], ReduceOp.BITWISE_OR, f"mask_sync/{n}", k
                        )
                effective = {**masks, **new_masks}
                payloads = []
                keeps = {}
                for ls in layers:
                    n = ls.name
                    c = z_node[n] + v[n]
                    if n in effective:
                        keep = cache.get(ls, effective[n])
                        keeps[n] = keep
                        if keep.elements:
                            payloads.append((n, compress(c, keep).data.ravel()))
                    else:
                        payloads.append((n, c.ravel()))
                z_new = {}
                reduced: dict[str, np.ndarray] = {}
                for bi, bucket in enumerate(bucketize(payloads)):
                    rbuf = yield AllReduce(
                        inter, bucket.buffer, ReduceOp.AVG, f"z_sync/b{bi}", k, detail=bucket.detail
                    )
                    reduced.update(unbucketize(bucket, rbuf))
                for ls in layers:
                    n = ls.name
                    if n in effective:
                        keep = keeps[n]
                        flat = reduced.get(n)
                        compact = CompactBuffer(
                            layer=n,
                            shape=keep.compact_shape,
                            data=(flat.reshape(keep.compact_shape) if flat is not None
                                  else np.zeros(keep.compact_shape)),
                        )
                        z_new[n] = decompress(compact, keep, ls.shape)
                    else:
                        z_new[n] = reduced[n].reshape(ls.shape)
                v = {n: v[n] + (z_node[n] - z_new[n]) for n in names}
                for n in names:
                    yield Broadcast(intra, leader_rank, z_new[n], f"z_bcast/{n}", k)
                for n in names:
                    yield Broadcast(intra, leader_rank, v[n], f"v_bcast/{n}", k)
                if not frozen:
                    for ls in prunable:
                        n = ls.name
                        yield Broadcast(intra, leader_rank, new_masks[n], f"m_bcast/{n}", k)
            else:
                z_new = {}
                for n in names:
                    z_new[n] = yield Broadcast(intra, leader_rank, None, f"z_bcast/{n}", k)
                v = {}
                for n in names:
                    v[n] = yield Broadcast(intra, leader_rank, None, f"v_bcast/{n}", k)
                new_masks = {}
                if not frozen:
                    for ls in prunable:
                        n = ls.name
                        new_masks[n] = yield Broadcast(intra, leader_rank, None, f"m_bcast/{n}", k)
            z = z_new
            if not frozen:
                for n in new_masks:
                    drift_now[n] = mask_drift(masks[n], new_masks[n])
                    masks[n] = new_masks[n]
                if prunable:
                    drift_history.append(max(drift_now.values()))

        # phase 5: intra dual update, residuals, penalty adaptation
        u = {n: dual_update_intra(theta[n], z_node[n], u[n]) for n in names}

        vec3 = np.empty(len(names) * 3, dtype=np.float64)
        r_intra_local = {}
        for li, n in enumerate(names):
            r = theta[n] - z_node[n]
            r_intra_local[n] = math.sqrt(_sq(r))
            vec3[li * 3 : li * 3 + 3] = (_sq(r), _sq(theta[n]), _sq(u[n]))
        node_sums = yield AllReduce(intra, vec3, ReduceOp.SUM, "res_intra", k)

        r_inter_local = {}
        if is_leader:
            vec9 = np.empty(len(names) * _INTER_SLOTS, dtype=np.float64)
            for li, n in enumerate(names):
                r_inter = z_node[n] - z[n]
                r_inter_local[n] = math.sqrt(_sq(r_inter))
                dz = z[n] - z_prev[n] if sync_iter else np.zeros_like(z[n])
                vec9[li * _INTER_SLOTS : (li + 1) * _INTER_SLOTS] = (
                    node_sums[li * 3], node_sums[li * 3 + 1], node_sums[li * 3 + 2],
                    _sq(r_inter), _sq(z_node[n] - z_node_prev[n]), _sq(z_node[n]),
                    _sq(v[n]), _sq(dz), _sq(z[n]),
                )
            global_sums = yield AllReduce(inter, vec9, ReduceOp.SUM, "res_inter", k)
            report = build_residual_report(
                layers, global_sums, sched, num_nodes, per_node,
                settings.eps_abs, settings.eps_rel,
            )
            yield Broadcast(intra, leader_rank, pack_report(report, names), "report", k)
        else:
            report_vec = yield Broadcast(intra, leader_rank, None, "report", k)
            report = unpack_report(report_vec, names)

        row = {
            "k": k,
            "frozen": frozen,
            "r_intra": r_intra_local,
            "state_sha": _digest(theta, names) + _digest(z, names)[:16],
            "cache_derive": cache.derive_calls,
            "cache_hits": cache.hits,
            "mask_sha": {n: hashlib.sha256(masks[n].tobytes()).hexdigest() for n in masks},
        }
        if is_leader:
            row["r_inter"] = r_inter_local
        if rank == 0:
            row["report"] = report
            row["rho1"] = dict(sched.rho1)
            row["rho2"] = dict(sched.rho2)
            row["drift"] = dict(drift_now)
            row["mask_popcount"] = {n: int(masks[n].sum()) for n in masks}
        if capture_states:
            row["theta_copy"] = {n: theta[n].copy() for n in names}
            row["z_node_copy"] = {n: z_node[n].copy() for n in names}

        u_scale = {n: 1.0 for n in names}
        if sched.adapt:
            sched, u_scale, v_scale = adapt_penalties(report, sched)
            for n in names:
                if u_scale[n] != 1.0:
                    u[n] = u[n] * u_scale[n]
                if v_scale[n] != 1.0:
                    v[n] = v[n] * v_scale[n]
        if capture_states:
            row["u_scale"] = dict(u_scale)
        trace.append(row)

        if not frozen and prunable and sync_iter:
            if freeze_check(k, settings.t_freeze, drift_history, settings.drift_window):
                frozen = True
                if is_leader:
                    for ls in prunable:
                        cache.get(ls, masks[ls.name])
                    cache.seal()

        if settings.stop_on_convergence and report.converged:
            converged_at = k
            break

    state = ConsensusState(
        rank=rank, iteration=trace[-1]["k"] if trace else 0, frozen=frozen,
        theta=theta, u=u, z_node=z_node, v=v, z=z, masks=masks, schedule=sched,
    )
    return RankResult(
        rank=rank, state=state, trace=trace, converged_at=converged_at,
        cache_derive=cache.derive_calls, cache_hits=cache.hits,
    )


def run_hierarchical(
    cluster: Cluster,
    workload: Workload,
    constraints: Constraints,
    schedule: PenaltySchedule,
    solver: SolverConfig,
    settings: ConsensusSettings,
    capture_states: bool = False,
) -> dict[int, RankResult]:
    programs = {
        rank: hierarchical_program(
            rank, cluster, workload, constraints, schedule, solver, settings, capture_states
        )
        for rank in range(cluster.topology.world_size)
    }
    return cluster.run(programs)
