"""Comparison systems sharing the transport and workloads.

* dense synchronous SGD: full-precision gradient averaging over all ranks
  every step, keeping parameters bit-identical everywhere;
* top-k gradient compression with error feedback: each rank ships only its
  largest-magnitude gradient entries as (value, index) pairs and accumulates
  the rest into a residual;
* flat consensus: single-level consensus with projection applied to the
  global variable after a dense all-rank aggregation, so payloads are never
  shrunk.

All three log through the same ledger conventions as the hierarchical run,
which makes per-iteration byte ratios directly comparable.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

from .consensus import (
    ConsensusSettings,
    LayerResiduals,
    PenaltySchedule,
    ResidualReport,
    freeze_check,
    pack_report,
    unpack_report,
)
from .errors import ProtocolError
from .sparsity import SparsityConstraint, extract_mask, mask_drift, project_composite
from .tensors import LayerSpec
from .transport import AllGather, AllReduce, Broadcast, Cluster, ReduceOp
from .workloads import (
    Params,
    SolverConfig,
    Workload,
    batch_rng,
    init_rng,
    minibatches,
    proximal_sgd,
)


@dataclass
class BaselineRankResult:
    rank: int
    params: Params
    trace: list[dict]
    masks: dict[str, np.ndarray] | None = None
    converged_at: int | None = None


def _digest(params: Params, names) -> str:
    h = hashlib.sha256()
    for n in names:
        h.update(params[n].tobytes())
    return h.hexdigest()


def _batch_stream(shard, batch_size: int, seed: int, rank: int):
    """Endless deterministic mini-batch iterator, reshuffled per epoch."""
    epoch = 0
    batch = min(batch_size, shard.rows)
    while True:
        rng = batch_rng(seed, rank, epoch)
        for idx in minibatches(shard.rows, batch, rng):
            yield idx
        epoch += 1


def topk_select(flat: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest |values|, ties broken toward lower indices."""
    order = np.argsort(-np.abs(flat), kind="stable")
    return np.sort(order[:k])


def dense_sync_program(rank, cluster: Cluster, workload: Workload, solver: SolverConfig, steps: int, seed: int):
    """DDP-style step: average full gradients over all ranks, identical update."""
    group = cluster.global_group()
    names = [ls.name for ls in workload.layers]
    params = workload.init_params(init_rng(seed))
    velocity = {n: np.zeros_like(params[n]) for n in names}
    shard = workload.shards[rank]
    batches = _batch_stream(shard, solver.batch_size, seed, rank)
    trace = []
    for step in range(1, steps + 1):
        idx = next(batches)
        loss, grads = workload.loss_and_grad(params, shard.features[idx], shard.targets[idx])
        avg = {}
        for n in names:
            g = grads[n] + solver.weight_decay * params[n]
            avg[n] = yield AllReduce(group, g, ReduceOp.AVG, f"grad/{n}", step)
        for n in names:
            velocity[n] = solver.momentum * velocity[n] + avg[n]
            params[n] -= solver.lr * velocity[n]
            if not np.all(np.isfinite(params[n])):
                raise FloatingPointError(f"rank {rank}, step {step}: non-finite values in {n}")
        trace.append({"k": step, "loss": loss, "params_sha": _digest(params, names)})
    return BaselineRankResult(rank=rank, params=params, trace=trace)


def topk_program(
    rank, cluster: Cluster, workload: Workload, solver: SolverConfig, steps: int, seed: int, rate: float
):
    """Top-k compression with error feedback.

    Per layer each rank transmits the ceil(rate * n) largest entries of
    (gradient + residual) as value/index pairs over an all-gather; untransmitted
    entries stay in the residual. At least one entry is always sent.
    """
    group = cluster.global_group()
    world = len(group.members)
    names = [ls.name for ls in workload.layers]
    params = workload.init_params(init_rng(seed))
    velocity = {n: np.zeros_like(params[n]) for n in names}
    residual = {n: np.zeros_like(params[n]) for n in names}
    shard = workload.shards[rank]
    batches = _batch_stream(shard, solver.batch_size, seed, rank)
    trace = []
    for step in range(1, steps + 1):
        idx = next(batches)
        loss, grads = workload.loss_and_grad(params, shard.features[idx], shard.targets[idx])
        avg = {}
        for n in names:
            g = grads[n] + solver.weight_decay * params[n]
            acc = residual[n] + g
            flat = acc.ravel()
            k = max(1, math.ceil(rate * flat.size))
            sel = topk_select(flat, k)
            payload = np.concatenate([flat[sel], sel.astype(np.float64)])
            gathered = yield AllGather(group, payload, f"topk/{n}", step)
            dense = np.zeros_like(flat)
            for contrib in gathered:
                values, indices = contrib[:k], contrib[k:].astype(np.intp)
                dense[indices] += values
            avg[n] = (dense / float(world)).reshape(acc.shape)
            kept = np.zeros_like(flat)
            kept[sel] = flat[sel]
            residual[n] = (flat - kept).reshape(acc.shape)
        for n in names:
            velocity[n] = solver.momentum * velocity[n] + avg[n]
            params[n] -= solver.lr * velocity[n]
        trace.append({"k": step, "loss": loss, "params_sha": _digest(params, names)})
    return BaselineRankResult(rank=rank, params=params, trace=trace)


def flat_consensus_program(
    rank,
    cluster: Cluster,
    workload: Workload,
    constraints: dict[str, list[SparsityConstraint]],
    schedule: PenaltySchedule,
    solver: SolverConfig,
    settings: ConsensusSettings,
):
    """Single-level consensus: every rank talks to the global variable directly.

    The z-update aggregates theta + u over one flat all-rank group and the
    projection is applied to the global tensor after aggregation, so every
    sync moves full dense payloads.
    """
    group = cluster.global_group()
    world = len(group.members)
    names = [ls.name for ls in workload.layers]
    layers = workload.layers
    prunable = [ls for ls in layers if constraints.get(ls.name)]
    sched = schedule

    params0 = workload.init_params(init_rng(settings.seed))
    theta = {n: params0[n].copy() for n in names}
    z = {n: params0[n].copy() for n in names}
    u = {n: np.zeros_like(params0[n]) for n in names}
    masks = {ls.name: np.ones(ls.shape, dtype=bool) for ls in prunable}
    frozen = False
    drift_history: list[float] = []
    shard = workload.shards[rank]
    trace = []
    converged_at = None

    for k in range(1, settings.iterations + 1):
        rng = batch_rng(settings.seed, rank, k)
        theta = proximal_sgd(workload, shard, theta, z, u, sched.rho1, solver, rng)
        for n in names:
            if not np.all(np.isfinite(theta[n])):
                raise FloatingPointError(
                    f"rank {rank}, iteration {k}: non-finite values in theta[{n}]"
                )

        z_prev = z
        z = {}
        drift_now = {}
        for ls in layers:
            n = ls.name
            total = yield AllReduce(group, theta[n] + u[n], ReduceOp.SUM, f"z_sync/{n}", k)
            gamma = settings.weight_decay + world * sched.rho1[n]
            cand = (sched.rho1[n] * total) / gamma
            cons = constraints.get(n, [])
            if cons and frozen:
                z[n] = cand * masks[n]
            elif cons:
                z[n] = project_composite(cand, cons)
                new_mask = extract_mask(z[n])
                drift_now[n] = mask_drift(masks[n], new_mask)
                masks[n] = new_mask
            else:
                z[n] = cand
        if drift_now:
            drift_history.append(max(drift_now.values()))

        u = {n: u[n] + (theta[n] - z[n]) for n in names}

        vec3 = np.empty(len(names) * 3, dtype=np.float64)
        r_local = {}
        for li, n in enumerate(names):
            r = theta[n] - z[n]
            r_local[n] = math.sqrt(float(np.sum(r * r)))
            vec3[li * 3 : li * 3 + 3] = (
                float(np.sum(r * r)), float(np.sum(theta[n] ** 2)), float(np.sum(u[n] ** 2))
            )
        sums = yield AllReduce(group, vec3, ReduceOp.SUM, "res_flat", k)

        layer_reports = {}
        r_pri_sq = r_dual_sq = eps_pri_sq = eps_dual_sq = 0.0
        for li, ls in enumerate(layers):
            n = ls.name
            rho1 = sched.rho1[n]
            r = math.sqrt(sums[li * 3])
            s = rho1 * math.sqrt(world * float(np.sum((z[n] - z_prev[n]) ** 2)))
            eps_pri = math.sqrt(ls.elements * world) * settings.eps_abs + settings.eps_rel * max(
                math.sqrt(sums[li * 3 + 1]), math.sqrt(world * float(np.sum(z[n] ** 2)))
            )
            eps_dual = (
                math.sqrt(ls.elements * world) * settings.eps_abs
                + settings.eps_rel * rho1 * math.sqrt(sums[li * 3 + 2])
            )
            layer_reports[n] = LayerResiduals(r, s, 0.0, 0.0, eps_pri, eps_dual, 0.0, 0.0)
            r_pri_sq += r * r
            r_dual_sq += s * s
            eps_pri_sq += eps_pri * eps_pri
            eps_dual_sq += eps_dual * eps_dual
        report = ResidualReport(
            layers=layer_reports,
            r_pri=math.sqrt(r_pri_sq),
            r_dual=math.sqrt(r_dual_sq),
            eps_pri=math.sqrt(eps_pri_sq),
            eps_dual=math.sqrt(eps_dual_sq),
            converged=(math.sqrt(r_pri_sq) <= math.sqrt(eps_pri_sq)
                       and math.sqrt(r_dual_sq) <= math.sqrt(eps_dual_sq)),
        )

        row = {
            "k": k,
            "frozen": frozen,
            "r_intra": r_local,
            "state_sha": _digest(theta, names) + _digest(z, names)[:16],
        }
        if rank == 0:
            row["report"] = report
            row["rho1"] = dict(sched.rho1)
            row["rho2"] = dict(sched.rho2)
            row["drift"] = dict(drift_now)
            row["mask_popcount"] = {n: int(masks[n].sum()) for n in masks}
        trace.append(row)

        if sched.adapt:
            rho1 = dict(sched.rho1)
            u_scale = {}
            for n in names:
                lr = report.layers[n]
                old = rho1[n]
                if lr.r_intra > sched.mu * lr.s_intra:
                    rho1[n] = min(old * sched.tau_inc, sched.rho1_max)
                elif lr.s_intra > sched.mu * lr.r_intra:
                    rho1[n] = old / sched.tau_dec
                u_scale[n] = old / rho1[n] if rho1[n] != old else 1.0
            sched = replace(sched, rho1=rho1)
            for n in names:
                if u_scale[n] != 1.0:
                    u[n] = u[n] * u_scale[n]

        if not frozen and prunable:
            if freeze_check(k, settings.t_freeze, drift_history, settings.drift_window):
                frozen = True

        if settings.stop_on_convergence and report.converged:
            converged_at = k
            break

    return BaselineRankResult(rank=rank, params=theta, trace=trace, masks=masks, converged_at=converged_at)


def run_dense_sync(cluster, workload, solver, steps, seed) -> dict[int, BaselineRankResult]:
    results = cluster.run({
        r: dense_sync_program(r, cluster, workload, solver, steps, seed)
        for r in range(cluster.topology.world_size)
    })
    _check_divergence(results)
    return results


def run_topk(cluster, workload, solver, steps, seed, rate) -> dict[int, BaselineRankResult]:
    results = cluster.run({
        r: topk_program(r, cluster, workload, solver, steps, seed, rate)
        for r in range(cluster.topology.world_size)
    })
    _check_divergence(results)
    return results


def run_flat_consensus(
    cluster, workload, constraints, schedule, solver, settings
) -> dict[int, BaselineRankResult]:
    return cluster.run({
        r: flat_consensus_program(r, cluster, workload, constraints, schedule, solver, settings)
        for r in range(cluster.topology.world_size)
    })


def _check_divergence(results: dict[int, BaselineRankResult]) -> None:
    """Synchronous baselines must keep parameters bit-identical across ranks."""
    ranks = sorted(results)
    reference = results[ranks[0]].trace
    for rank in ranks[1:]:
        for row, ref in zip(results[rank].trace, reference):
            if row["params_sha"] != ref["params_sha"]:
                raise ProtocolError(
                    f"parameter divergence at step {row['k']}: rank {rank} != rank {ranks[0]}"
                )
