"""Experiment configuration, orchestration, and metrics export.

A single JSON config file describes one experiment (topology, workload,
constraints, penalties, solver, run control, latency model, baseline
selector). Running it produces ``metrics.jsonl``, ``ledger.jsonl``,
``masks/<layer>.csv`` and ``summary.json`` in the output directory; reruns
with the same config and seed are byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    BaselineRankResult,
    run_dense_sync,
    run_flat_consensus,
    run_topk,
)
from .consensus import (
    ConsensusSettings,
    PenaltySchedule,
    RankResult,
    run_hierarchical,
)
from .errors import ConfigError
from .sparsity import ConstraintKind, SparsityConstraint, write_mask_csv
from .tensors import LayerKind, LayerSpec
from .transport import (
    Cluster,
    CommLedger,
    GroupScope,
    LatencyModel,
    LedgerEntry,
    Topology,
    iteration_latency,
    read_ledger_jsonl,
)
from .workloads import (
    SolverConfig,
    Workload,
    build_logistic,
    build_quadratic,
    build_tinyconv,
)

BASELINES = ("hsadmm", "dense", "topk", "flat")

# Steady-state compressed/dense inter-node volume target reported for the
# resnet-analogue reference configuration (5.21 GB vs 13.00 GB dense).
REFERENCE_VOLUME_RATIO = 5.21 / 13.00

_CONSTRAINT_KINDS = {
    "filter_keep": ConstraintKind.FILTER_KEEP,
    "channel_keep": ConstraintKind.CHANNEL_KEEP,
    "shape_keep": ConstraintKind.SHAPE_KEEP,
}


@dataclass(frozen=True)
class TopologyConfig:
    nodes: int = 2
    accels_per_node: int = 2


@dataclass(frozen=True)
class WorkloadConfig:
    kind: str = "quadratic"
    dim: int = 16
    shard_rows: int = 128
    noise: float = 0.0
    input_channels: int = 3
    image_size: int = 8
    conv_filters: int = 8
    kernel: int = 3
    classes: int = 4
    init: str = "random"


@dataclass(frozen=True)
class ConstraintConfig:
    layer: str
    kind: str
    keep_rate: float | None = None
    keep_count: int | None = None


@dataclass(frozen=True)
class PenaltyConfig:
    rho1: float = 1.5e-3
    rho2: float = 1.5e-4
    rho1_max: float = 10.0
    rho2_max: float = 10.0
    mu: float = 10.0
    tau_inc: float = 2.0
    tau_dec: float = 2.0
    adapt: bool = True


@dataclass(frozen=True)
class RunControlConfig:
    iterations: int = 60
    t_freeze: int = 10
    drift_window: int = 3
    sync_period: int = 1
    eps_abs: float = 1e-4
    eps_rel: float = 1e-3
    stop_on_convergence: bool = True


@dataclass(frozen=True)
class LatencyConfig:
    alpha_intra: float = 5e-6
    beta_intra: float = 3.0e11
    alpha_inter: float = 2e-5
    beta_inter: float = 1.25e10


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    baseline: str = "hsadmm"
    topk_rate: float = 0.01
    out_dir: str | None = None
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    constraints: tuple[ConstraintConfig, ...] = ()
    penalties: PenaltyConfig = field(default_factory=PenaltyConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    run: RunControlConfig = field(default_factory=RunControlConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)


def _build_section(dc_type, data, context):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(dc_type)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    return dc_type(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    sections = {
        "topology": TopologyConfig,
        "workload": WorkloadConfig,
        "penalties": PenaltyConfig,
        "solver": SolverConfig,
        "run": RunControlConfig,
        "latency": LatencyConfig,
    }
    known = set(sections) | {"seed", "baseline", "topk_rate", "out_dir", "constraints"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, dc_type in sections.items():
        if key in data:
            kwargs[key] = _build_section(dc_type, data[key], key)
    if "constraints" in data:
        kwargs["constraints"] = tuple(
            _build_section(ConstraintConfig, c, f"constraints[{i}]")
            for i, c in enumerate(data["constraints"])
        )
    for key in ("seed", "baseline", "topk_rate", "out_dir"):
        if key in data:
            kwargs[key] = data[key]
    return ExperimentConfig(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "seed": cfg.seed,
        "baseline": cfg.baseline,
        "topk_rate": cfg.topk_rate,
        "out_dir": cfg.out_dir,
        "topology": dataclasses.asdict(cfg.topology),
        "workload": dataclasses.asdict(cfg.workload),
        "constraints": [dataclasses.asdict(c) for c in cfg.constraints],
        "penalties": dataclasses.asdict(cfg.penalties),
        "solver": dataclasses.asdict(cfg.solver),
        "run": dataclasses.asdict(cfg.run),
        "latency": dataclasses.asdict(cfg.latency),
    }


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def layer_specs_for(wcfg: WorkloadConfig) -> list[LayerSpec]:
    """Layer shapes the configured workload will expose, without building data."""
    if wcfg.kind == "quadratic":
        return [LayerSpec("x", LayerKind.FULLY_CONNECTED, (1, wcfg.dim))]
    if wcfg.kind == "logistic":
        return [LayerSpec("w", LayerKind.FULLY_CONNECTED, (1, wcfg.dim))]
    if wcfg.kind == "tinyconv":
        oh = wcfg.image_size - wcfg.kernel + 1
        return [
            LayerSpec(
                "conv1", LayerKind.CONV,
                (wcfg.conv_filters, wcfg.input_channels, wcfg.kernel, wcfg.kernel),
                prunable=True,
            ),
            LayerSpec("fc", LayerKind.FULLY_CONNECTED, (wcfg.classes, wcfg.conv_filters * oh * oh)),
        ]
    raise ConfigError(f"unknown workload kind {wcfg.kind!r}")


def validate_config(cfg: ExperimentConfig) -> None:
    """Raise ConfigError describing every problem found, before any compute."""
    problems: list[str] = []
    if cfg.baseline not in BASELINES:
        problems.append(f"baseline must be one of {BASELINES}, got {cfg.baseline!r}")
    if cfg.topology.nodes < 1 or cfg.topology.accels_per_node < 1:
        problems.append("topology dimensions must be positive")
    if not (0.0 < cfg.topk_rate <= 1.0):
        problems.append(f"topk_rate must lie in (0, 1], got {cfg.topk_rate}")
    if cfg.run.iterations < 1:
        problems.append("run.iterations must be at least 1")
    if cfg.run.sync_period < 1:
        problems.append("run.sync_period must be at least 1")
    if cfg.run.t_freeze < 1:
        problems.append("run.t_freeze must be at least 1")
    if cfg.penalties.rho1 <= 0 or cfg.penalties.rho1 > cfg.penalties.rho1_max:
        problems.append("penalties.rho1 must lie in (0, rho1_max]")
    if cfg.penalties.rho2 < 0 or cfg.penalties.rho2 > cfg.penalties.rho2_max:
        problems.append("penalties.rho2 must lie in [0, rho2_max]")
    if cfg.solver.lr <= 0 or cfg.solver.epochs < 1 or cfg.solver.batch_size < 1:
        problems.append("solver requires lr > 0, epochs >= 1, batch_size >= 1")
    if cfg.workload.shard_rows < 1:
        problems.append("workload.shard_rows must be positive")
    if cfg.workload.init not in ("random", "pretrained"):
        problems.append(f"workload.init must be 'random' or 'pretrained', got {cfg.workload.init!r}")

    try:
        layers = {ls.name: ls for ls in layer_specs_for(cfg.workload)}
    except ConfigError as exc:
        problems.append(str(exc))
        layers = {}

    seen: set[tuple[str, str]] = set()
    for c in cfg.constraints:
        if c.kind not in _CONSTRAINT_KINDS:
            problems.append(f"constraint kind {c.kind!r} unknown")
            continue
        if (c.keep_rate is None) == (c.keep_count is None):
            problems.append(f"constraint on {c.layer!r}: give exactly one of keep_rate/keep_count")
            continue
        if (c.layer, c.kind) in seen:
            problems.append(f"duplicate constraint {c.kind} on layer {c.layer!r}")
        seen.add((c.layer, c.kind))
        ls = layers.get(c.layer)
        if ls is None:
            problems.append(f"constraint targets unknown layer {c.layer!r}")
            continue
        if ls.kind is not LayerKind.CONV or not ls.prunable:
            problems.append(f"constraint targets non-prunable layer {c.layer!r}")
            continue
        kind = _CONSTRAINT_KINDS[c.kind]
        groups = {
            ConstraintKind.FILTER_KEEP: ls.shape[0],
            ConstraintKind.CHANNEL_KEEP: ls.shape[1],
            ConstraintKind.SHAPE_KEEP: ls.shape[1] * ls.shape[2] * ls.shape[3],
        }[kind]
        try:
            SparsityConstraint(kind, keep_count=c.keep_count, keep_rate=c.keep_rate).resolve(groups)
        except Exception as exc:
            problems.append(f"constraint on {c.layer!r}: {exc}")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))


def build_workload(cfg: ExperimentConfig) -> Workload:
    w = cfg.workload
    world = cfg.topology.nodes * cfg.topology.accels_per_node
    if w.kind == "quadratic":
        return build_quadratic(w.dim, w.shard_rows, world, cfg.seed, noise=w.noise, init_kind=w.init)
    if w.kind == "logistic":
        return build_logistic(w.dim, w.shard_rows, world, cfg.seed, init_kind=w.init)
    if w.kind == "tinyconv":
        return build_tinyconv(
            w.shard_rows, world, cfg.seed,
            input_channels=w.input_channels, image_size=w.image_size,
            conv_filters=w.conv_filters, kernel=w.kernel, classes=w.classes,
            init_kind=w.init,
        )
    raise ConfigError(f"unknown workload kind {w.kind!r}")


def build_constraints(cfg: ExperimentConfig) -> dict[str, list[SparsityConstraint]]:
    out: dict[str, list[SparsityConstraint]] = {}
    for c in cfg.constraints:
        out.setdefault(c.layer, []).append(
            SparsityConstraint(_CONSTRAINT_KINDS[c.kind], keep_count=c.keep_count, keep_rate=c.keep_rate)
        )
    return out


def build_cluster(cfg: ExperimentConfig) -> Cluster:
    topo = Topology(cfg.topology.nodes, cfg.topology.accels_per_node)
    lat = LatencyModel(
        alpha_intra=cfg.latency.alpha_intra, beta_intra=cfg.latency.beta_intra,
        alpha_inter=cfg.latency.alpha_inter, beta_inter=cfg.latency.beta_inter,
    )
    return Cluster(topo, latency=lat)


def _settings(cfg: ExperimentConfig) -> ConsensusSettings:
    return ConsensusSettings(
        iterations=cfg.run.iterations,
        t_freeze=cfg.run.t_freeze,
        drift_window=cfg.run.drift_window,
        sync_period=cfg.run.sync_period,
        eps_abs=cfg.run.eps_abs,
        eps_rel=cfg.run.eps_rel,
        stop_on_convergence=cfg.run.stop_on_convergence,
        weight_decay=cfg.solver.weight_decay,
        seed=cfg.seed,
    )


def _schedule(cfg: ExperimentConfig, layer_names) -> PenaltySchedule:
    p = cfg.penalties
    return PenaltySchedule.uniform(
        layer_names, p.rho1, p.rho2,
        rho1_max=p.rho1_max, rho2_max=p.rho2_max,
        mu=p.mu, tau_inc=p.tau_inc, tau_dec=p.tau_dec, adapt=p.adapt,
    )


@dataclass
class RunResult:
    cfg: ExperimentConfig
    metrics: list[dict]
    ledger: CommLedger
    summary: dict
    rank_results: dict
    out_dir: str | None = None


def _bytes_by_scope(ledger: CommLedger, iteration: int) -> dict[str, int]:
    out = {s.value: 0 for s in GroupScope}
    for e in ledger.entries:
        if e.iteration == iteration:
            out[e.scope] += e.bytes
    return out


def _latency_by_scope(ledger: CommLedger, iteration: int, model: LatencyModel) -> dict[str, float]:
    entries = [e for e in ledger.entries if e.iteration == iteration]
    lat = iteration_latency(entries, model)
    return {s.value: lat.get(s.value, 0.0) for s in GroupScope}


def _consensus_metrics(cfg, results, cluster, baseline: str) -> list[dict]:
    topo = cluster.topology
    ranks = sorted(results)
    leaders = list(topo.leaders)
    rows = []
    rank0_trace = results[0].trace
    for i, r0 in enumerate(rank0_trace):
        k = r0["k"]
        report = r0["report"]
        layer_rows = {}
        for name, lr in report.layers.items():
            layer_rows[name] = {
                "r_intra": lr.r_intra,
                "s_intra": lr.s_intra,
                "r_inter": lr.r_inter,
                "s_inter": lr.s_inter,
                "eps_pri_intra": lr.eps_pri_intra,
                "eps_dual_intra": lr.eps_dual_intra,
                "eps_pri_inter": lr.eps_pri_inter,
                "eps_dual_inter": lr.eps_dual_inter,
                "rho1": r0["rho1"][name],
                "rho2": r0["rho2"][name],
                "mask_drift": r0["drift"].get(name),
            }
        row = {
            "baseline": baseline,
            "k": k,
            "frozen": r0["frozen"],
            "converged": report.converged,
            "R_pri": report.r_pri,
            "R_dual": report.r_dual,
            "eps_pri": report.eps_pri,
            "eps_dual": report.eps_dual,
            "layers": layer_rows,
            "rank_r_intra": {
                name: [results[r].trace[i]["r_intra"][name] for r in ranks]
                for name in layer_rows
            },
            "node_r_inter": {
                name: [
                    results[lr_rank].trace[i].get("r_inter", {}).get(name, 0.0)
                    for lr_rank in leaders
                ]
                for name in layer_rows
            },
            "mask_popcount": r0["mask_popcount"],
            "state_sha": r0["state_sha"],
            "bytes": _bytes_by_scope(cluster.ledger, k),
            "latency": _latency_by_scope(cluster.ledger, k, cluster.latency),
        }
        if "cache_derive" in results[0].trace[i]:
            leader_trace = results[leaders[0]].trace[i]
            row["cache"] = {
                "derive_calls": leader_trace.get("cache_derive", 0),
                "hits": leader_trace.get("cache_hits", 0),
            }
        rows.append(row)
    return rows


def _baseline_step_metrics(cfg, results, cluster, baseline: str) -> list[dict]:
    rows = []
    for row0 in results[0].trace:
        k = row0["k"]
        rows.append({
            "baseline": baseline,
            "k": k,
            "loss": row0["loss"],
            "params_sha": row0["params_sha"],
            "bytes": _bytes_by_scope(cluster.ledger, k),
            "latency": _latency_by_scope(cluster.ledger, k, cluster.latency),
        })
    return rows


def dense_bytes_per_sync(cfg: ExperimentConfig) -> int:
    """Payload bytes one dense consensus sync would move (4 bytes/element)."""
    return sum(4 * ls.elements for ls in layer_specs_for(cfg.workload))


def run_experiment(cfg: ExperimentConfig, capture_states: bool = False) -> RunResult:
    validate_config(cfg)
    cluster = build_cluster(cfg)
    workload = build_workload(cfg)
    constraints = build_constraints(cfg)
    names = [ls.name for ls in workload.layers]
    out_dir = cfg.out_dir

    try:
        if cfg.baseline == "hsadmm":
            results = run_hierarchical(
                cluster, workload, constraints, _schedule(cfg, names),
                cfg.solver, _settings(cfg), capture_states=capture_states,
            )
            metrics = _consensus_metrics(cfg, results, cluster, "hsadmm")
        elif cfg.baseline == "flat":
            results = run_flat_consensus(
                cluster, workload, constraints, _schedule(cfg, names), cfg.solver, _settings(cfg)
            )
            metrics = _consensus_metrics(cfg, results, cluster, "flat")
        else:
            shard_rows = workload.shards[0].rows
            batch = min(cfg.solver.batch_size, shard_rows)
            steps_per_iter = cfg.solver.epochs * math.ceil(shard_rows / batch)
            steps = cfg.run.iterations * steps_per_iter
            if cfg.baseline == "dense":
                results = run_dense_sync(cluster, workload, cfg.solver, steps, cfg.seed)
            else:
                results = run_topk(cluster, workload, cfg.solver, steps, cfg.seed, cfg.topk_rate)
            metrics = _baseline_step_metrics(cfg, results, cluster, cfg.baseline)
    except FloatingPointError as exc:
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "diagnostic.json"), "w", encoding="utf-8") as fh:
                json.dump({"error": str(exc), "config": config_to_dict(cfg)}, fh, indent=2, sort_keys=True)
        raise RuntimeError(f"aborted on non-finite state: {exc}") from exc

    summary = _build_summary(cfg, metrics, cluster, results)
    run = RunResult(cfg=cfg, metrics=metrics, ledger=cluster.ledger,
                    summary=summary, rank_results=results, out_dir=out_dir)
    if out_dir:
        _write_outputs(run)
    return run


def _build_summary(cfg, metrics, cluster, results) -> dict:
    ledger = cluster.ledger
    totals = {s.value: ledger.total_bytes(scope=s) for s in GroupScope}
    summary = {
        "baseline": cfg.baseline,
        "seed": cfg.seed,
        "iterations_run": len(metrics),
        "bytes": {**totals, "total": sum(totals.values())},
        "reference_volume_ratio": REFERENCE_VOLUME_RATIO,
    }
    if cfg.baseline in ("hsadmm", "flat"):
        last = metrics[-1] if metrics else None
        summary["converged"] = bool(last and last["converged"])
        summary["converged_at"] = next((m["k"] for m in metrics if m["converged"]), None)
        if last:
            summary["final"] = {
                "R_pri": last["R_pri"], "R_dual": last["R_dual"],
                "eps_pri": last["eps_pri"], "eps_dual": last["eps_dual"],
            }
            summary["rho_final"] = {
                name: {"rho1": vals["rho1"], "rho2": vals["rho2"]}
                for name, vals in last["layers"].items()
            }
        dense_sync = dense_bytes_per_sync(cfg)
        series = summarize_volume(ledger.entries, dense_bytes=dense_sync)
        summary["volume"] = series["totals"]
        if series["per_iteration"]:
            summary["volume"]["final_sync_bytes"] = series["per_iteration"][-1]["bytes"]
            summary["volume"]["dense_sync_bytes"] = dense_sync
    else:
        if metrics:
            summary["final_loss"] = metrics[-1]["loss"]
    return summary


def _write_outputs(run: RunResult) -> None:
    out = run.out_dir
    os.makedirs(out, exist_ok=True)
    save_config(run.cfg, os.path.join(out, "config.json"))
    with open(os.path.join(out, "metrics.jsonl"), "w", encoding="utf-8") as fh:
        for row in run.metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    run.ledger.to_jsonl(os.path.join(out, "ledger.jsonl"))
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(run.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    masks = _final_masks(run.rank_results)
    if masks:
        mask_dir = os.path.join(out, "masks")
        os.makedirs(mask_dir, exist_ok=True)
        for name, mask in sorted(masks.items()):
            write_mask_csv(os.path.join(mask_dir, f"{name}.csv"), mask)


def _final_masks(rank_results) -> dict:
    r0 = rank_results[0]
    if isinstance(r0, RankResult):
        return r0.state.masks
    if isinstance(r0, BaselineRankResult) and r0.masks:
        return r0.masks
    return {}


# -- reporting ----------------------------------------------------------------


def summarize_volume(entries, label_prefix: str = "z_sync", dense_bytes: int | None = None) -> dict:
    """Per-iteration and cumulative payload volume for matching collectives.

    ``entries`` may be :class:`LedgerEntry` objects or dicts read back from a
    ledger file. ``dense_bytes`` is the dense per-sync reference; when absent
    the largest observed per-iteration volume is used.
    """
    per_iter: dict[int, int] = {}
    for e in entries:
        if isinstance(e, LedgerEntry):
            label, it, nbytes = e.label, e.iteration, e.bytes
        else:
            label, it, nbytes = e.get("label", ""), e["iter"], e["bytes"]
        if label.startswith(label_prefix):
            per_iter[it] = per_iter.get(it, 0) + nbytes
    if not per_iter:
        return {"per_iteration": [], "totals": {}}
    reference = dense_bytes if dense_bytes else max(per_iter.values())
    series = []
    cumulative = 0
    if dense_bytes:
        # initial point: buffers are allocated dense before the first sync
        series.append({
            "iter": 0,
            "bytes": reference,
            "original_bytes": reference,
            "ratio": 1.0,
            "cumulative_bytes": 0,
        })
    for it in sorted(per_iter):
        cumulative += per_iter[it]
        series.append({
            "iter": it,
            "bytes": per_iter[it],
            "original_bytes": reference,
            "ratio": per_iter[it] / reference,
            "cumulative_bytes": cumulative,
        })
    dense_cumulative = reference * len(per_iter)
    totals = {
        "syncs": len(per_iter),
        "compressed_bytes": cumulative,
        "dense_bytes": dense_cumulative,
        "reduction_pct": 100.0 * (1.0 - cumulative / dense_cumulative),
    }
    return {"per_iteration": series, "totals": totals}


def export_residual_traces(metrics: list[dict], out_dir) -> dict[str, str]:
    """Write per-rank, per-node, and aggregate residual traces as CSV files."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "intra": os.path.join(out_dir, "residuals_intra.csv"),
        "inter": os.path.join(out_dir, "residuals_inter.csv"),
        "aggregate": os.path.join(out_dir, "residuals_aggregate.csv"),
    }
    with open(paths["intra"], "w", encoding="utf-8") as fh:
        fh.write("k,layer,rank,r_intra\n")
        for row in metrics:
            for layer, values in sorted(row.get("rank_r_intra", {}).items()):
                for rank, value in enumerate(values):
                    fh.write(f"{row['k']},{layer},{rank},{value!r}\n")
    with open(paths["inter"], "w", encoding="utf-8") as fh:
        fh.write("k,layer,node,r_inter\n")
        for row in metrics:
            for layer, values in sorted(row.get("node_r_inter", {}).items()):
                for node, value in enumerate(values):
                    fh.write(f"{row['k']},{layer},{node},{value!r}\n")
    with open(paths["aggregate"], "w", encoding="utf-8") as fh:
        fh.write(
            "k,layer,r_intra,s_intra,r_inter,s_inter,"
            "eps_pri_intra,eps_dual_intra,eps_pri_inter,eps_dual_inter\n"
        )
        for row in metrics:
            for layer, vals in sorted(row.get("layers", {}).items()):
                fh.write(
                    f"{row['k']},{layer},{vals['r_intra']!r},{vals['s_intra']!r},"
                    f"{vals['r_inter']!r},{vals['s_inter']!r},{vals['eps_pri_intra']!r},"
                    f"{vals['eps_dual_intra']!r},{vals['eps_pri_inter']!r},{vals['eps_dual_inter']!r}\n"
                )
    return paths


def compare_runs(dir_a, dir_b) -> dict:
    """Byte-volume ratio table between two completed run directories."""
    def load(dir_path):
        entries = read_ledger_jsonl(os.path.join(dir_path, "ledger.jsonl"))
        with open(os.path.join(dir_path, "summary.json"), "r", encoding="utf-8") as fh:
            summary = json.load(fh)
        return entries, summary

    entries_a, summary_a = load(dir_a)
    entries_b, summary_b = load(dir_b)

    def totals(entries):
        out: dict[str, int] = {}
        for e in entries:
            out[e["scope"]] = out.get(e["scope"], 0) + e["bytes"]
        out["total"] = sum(v for k, v in out.items() if k != "total")
        return out

    ta, tb = totals(entries_a), totals(entries_b)
    scopes = sorted(set(ta) | set(tb))
    return {
        "a": {"dir": str(dir_a), "baseline": summary_a.get("baseline"), "bytes": ta},
        "b": {"dir": str(dir_b), "baseline": summary_b.get("baseline"), "bytes": tb},
        "ratio_a_over_b": {
            s: (ta.get(s, 0) / tb[s]) if tb.get(s) else None for s in scopes
        },
    }
