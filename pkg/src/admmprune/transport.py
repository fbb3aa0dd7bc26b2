"""Deterministic simulated cluster: ranks, process groups, collectives, ledger.

Logical ranks are cooperatively scheduled generator tasks. A rank yields a
collective request (:class:`AllReduce`, :class:`Broadcast`, :class:`AllGather`)
and is resumed with the result. The scheduler advances runnable ranks in rank
order each round and completes a collective in the round after its last
member arrives, so no member ever observes a result before all members have
contributed. Reductions fold payloads in member order, which makes every run
bit-reproducible.

Byte accounting is fixed at 4 bytes per element (simulation arithmetic is
float64, but wire volumes are tracked as fp32). An all-reduce or all-gather
entry records the per-rank payload size with the group size alongside; a
broadcast entry records ``(members - 1) * payload`` since the root sends one
copy per follower. Zero-byte events (single-member broadcasts) are not
logged.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Any, Generator, Iterable, Mapping

import numpy as np

from .errors import ProtocolError, ShapeError

log = logging.getLogger(__name__)

ELEMENT_BYTES = 4
BUCKET_CAP_BYTES = 32 * 1024 * 1024


@dataclass(frozen=True)
class Topology:
    """Homogeneous cluster of ``num_nodes`` nodes with ``accels_per_node`` ranks each.

    Global rank ``r`` lives on node ``r // accels_per_node``; the rank with
    local rank zero on each node is that node's leader.
    """

    num_nodes: int
    accels_per_node: int

    def __post_init__(self):
        if self.num_nodes < 1 or self.accels_per_node < 1:
            raise ShapeError("topology dimensions must be positive")

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.accels_per_node

    def node_of(self, rank: int) -> int:
        return rank // self.accels_per_node

    def local_rank(self, rank: int) -> int:
        return rank % self.accels_per_node

    def leader_of(self, node: int) -> int:
        return node * self.accels_per_node

    def is_leader(self, rank: int) -> bool:
        return self.local_rank(rank) == 0

    @property
    def leaders(self) -> tuple[int, ...]:
        return tuple(self.leader_of(i) for i in range(self.num_nodes))


class GroupScope(enum.Enum):
    INTRA = "intra"
    INTER = "inter"
    GLOBAL = "global"


@dataclass(frozen=True)
class ProcessGroup:
    id: str
    members: tuple[int, ...]
    scope: GroupScope

    def __post_init__(self):
        if len(set(self.members)) != len(self.members) or not self.members:
            raise ShapeError(f"group {self.id}: members must be non-empty and unique")


class ReduceOp(enum.Enum):
    SUM = "sum"
    AVG = "avg"
    BITWISE_OR = "bor"


@dataclass
class AllReduce:
    group: ProcessGroup
    payload: np.ndarray
    op: ReduceOp
    tag: str
    iteration: int
    detail: tuple[tuple[str, int], ...] | None = None


@dataclass
class Broadcast:
    group: ProcessGroup
    root: int
    payload: np.ndarray | None
    tag: str
    iteration: int


@dataclass
class AllGather:
    group: ProcessGroup
    payload: np.ndarray
    tag: str
    iteration: int


CollectiveCall = AllReduce | Broadcast | AllGather
RankProgram = Generator[CollectiveCall, Any, Any]


@dataclass(frozen=True)
class LedgerEntry:
    iteration: int
    group: str
    scope: str
    op: str
    elements: int
    bytes: int
    members: int
    label: str
    detail: tuple[tuple[str, int], ...] | None = None

    def to_dict(self) -> dict:
        d = {
            "iter": self.iteration,
            "group": self.group,
            "scope": self.scope,
            "op": self.op,
            "elements": self.elements,
            "bytes": self.bytes,
            "members": self.members,
            "label": self.label,
        }
        if self.detail is not None:
            d["detail"] = {name: elems for name, elems in self.detail}
        return d


class CommLedger:
    """Append-only record of completed collectives."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def append(self, entry: LedgerEntry) -> None:
        if entry.bytes <= 0:
            raise ShapeError("ledger entries must carry positive byte counts")
        self.entries.append(entry)

    def total_bytes(
        self,
        scope: GroupScope | str | None = None,
        iteration: int | None = None,
        label_prefix: str | None = None,
    ) -> int:
        scope_val = scope.value if isinstance(scope, GroupScope) else scope
        total = 0
        for e in self.entries:
            if scope_val is not None and e.scope != scope_val:
                continue
            if iteration is not None and e.iteration != iteration:
                continue
            if label_prefix is not None and not e.label.startswith(label_prefix):
                continue
            total += e.bytes
        return total

    def to_jsonl(self, path) -> None:
        import json

        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_ledger_jsonl(path) -> list[dict]:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class LatencyModel:
    """Affine latency proxy per collective: ``alpha + bytes / beta``.

    Intra-node links are modelled as far faster than inter-node ones; the
    global scope (flat all-rank groups) pays inter-node costs.
    """

    alpha_intra: float = 5e-6
    beta_intra: float = 3.0e11
    alpha_inter: float = 2e-5
    beta_inter: float = 1.25e10

    def time(self, scope: str, nbytes: int) -> float:
        if scope == GroupScope.INTRA.value:
            return self.alpha_intra + nbytes / self.beta_intra
        return self.alpha_inter + nbytes / self.beta_inter


def iteration_latency(entries: Iterable[LedgerEntry], model: LatencyModel) -> dict[str, float]:
    out: dict[str, float] = {}
    for e in entries:
        out[e.scope] = out.get(e.scope, 0.0) + model.time(e.scope, e.bytes)
    return out


# -- bucketing ---------------------------------------------------------------


@dataclass
class Bucket:
    """Contiguous flat buffer packing several named payloads."""

    buffer: np.ndarray
    layout: tuple[tuple[str, int, int], ...]  # (name, offset, elements)

    @property
    def detail(self) -> tuple[tuple[str, int], ...]:
        return tuple((name, elems) for name, _, elems in self.layout)


def bucketize(
    payloads: list[tuple[str, np.ndarray]], cap_bytes: int = BUCKET_CAP_BYTES
) -> list[Bucket]:
    """Greedily coalesce payloads into contiguous buffers of at most ``cap_bytes``.

    Tensors are never split; a single tensor larger than the cap gets its own
    oversized bucket and a warning. Concatenating the buckets reproduces the
    concatenation of the inputs. Sizes are accounted at 4 bytes per element.
    """
    buckets: list[Bucket] = []
    current: list[tuple[str, np.ndarray]] = []
    current_bytes = 0

    def flush():
        nonlocal current, current_bytes
        if not current:
            return
        layout = []
        offset = 0
        for name, arr in current:
            layout.append((name, offset, arr.size))
            offset += arr.size
        buffer = np.concatenate([arr.ravel() for _, arr in current]) if current else np.empty(0)
        buckets.append(Bucket(buffer=np.ascontiguousarray(buffer, dtype=np.float64), layout=tuple(layout)))
        current = []
        current_bytes = 0

    for name, arr in payloads:
        nbytes = arr.size * ELEMENT_BYTES
        if nbytes > cap_bytes:
            flush()
            log.warning("payload %s (%d bytes) exceeds bucket cap %d; using oversized bucket", name, nbytes, cap_bytes)
            current = [(name, arr)]
            current_bytes = nbytes
            flush()
            continue
        if current_bytes + nbytes > cap_bytes:
            flush()
        current.append((name, arr))
        current_bytes += nbytes
    flush()
    return buckets


def unbucketize(bucket: Bucket, buffer: np.ndarray) -> dict[str, np.ndarray]:
    """Split a (reduced) flat buffer back into the bucket's named payloads."""
    if buffer.size != bucket.buffer.size:
        raise ShapeError(f"buffer size {buffer.size} does not match bucket {bucket.buffer.size}")
    out = {}
    for name, offset, elems in bucket.layout:
        out[name] = buffer[offset : offset + elems].copy()
    return out


# -- scheduler ---------------------------------------------------------------


@dataclass
class _Posted:
    call: CollectiveCall
    rank: int


class Cluster:
    """Owns the topology, process groups, scheduler, and communication ledger."""

    def __init__(self, topology: Topology, latency: LatencyModel | None = None):
        self.topology = topology
        self.ledger = CommLedger()
        self.latency = latency or LatencyModel()
        self._intra = {
            i: ProcessGroup(
                id=f"intra{i}",
                members=tuple(range(i * topology.accels_per_node, (i + 1) * topology.accels_per_node)),
                scope=GroupScope.INTRA,
            )
            for i in range(topology.num_nodes)
        }
        self._leaders = ProcessGroup(id="leaders", members=topology.leaders, scope=GroupScope.INTER)
        self._global = ProcessGroup(id="global", members=tuple(range(topology.world_size)), scope=GroupScope.GLOBAL)

    def intra_group(self, node: int) -> ProcessGroup:
        return self._intra[node]

    def leader_group(self) -> ProcessGroup:
        return self._leaders

    def global_group(self) -> ProcessGroup:
        return self._global

    # scheduling

    def run(self, programs: Mapping[int, RankProgram]) -> dict[int, Any]:
        """Drive rank programs to completion; returns each program's return value."""
        gens = dict(programs)
        started: set[int] = set()
        inbox: dict[int, Any] = {}
        blocked: dict[int, CollectiveCall] = {}
        pending: dict[str, dict[int, CollectiveCall]] = {}
        results: dict[int, Any] = {}

        while len(results) < len(gens):
            progressed = False
            for rank in sorted(gens):
                if rank in results or rank in blocked:
                    continue
                gen = gens[rank]
                try:
                    if rank not in started:
                        started.add(rank)
                        call = next(gen)
                    else:
                        call = gen.send(inbox.pop(rank, None))
                except StopIteration as stop:
                    results[rank] = stop.value
                    progressed = True
                    continue
                self._validate_post(rank, call)
                blocked[rank] = call
                pending.setdefault(call.group.id, {})[rank] = call
                progressed = True

            for gid in sorted(pending):
                posted = pending[gid]
                group = next(iter(posted.values())).group
                if set(posted) != set(group.members):
                    continue
                delivered = self._complete(group, posted)
                for rank, value in delivered.items():
                    inbox[rank] = value
                    del blocked[rank]
                del pending[gid]
                progressed = True

            if not progressed:
                waiting = {r: c.tag for r, c in blocked.items()}
                raise ProtocolError(f"collective deadlock; blocked ranks: {waiting}")
        return results

    def _validate_post(self, rank: int, call: CollectiveCall) -> None:
        if not isinstance(call, (AllReduce, Broadcast, AllGather)):
            raise ProtocolError(f"rank {rank} yielded a non-collective object: {call!r}")
        if rank not in call.group.members:
            raise ProtocolError(f"rank {rank} is not a member of group {call.group.id}")
        if isinstance(call, Broadcast) and call.root not in call.group.members:
            raise ProtocolError(f"broadcast root {call.root} is not in group {call.group.id}")
        if isinstance(call, AllReduce):
            if call.op is ReduceOp.BITWISE_OR:
                if call.payload.dtype != np.bool_:
                    raise TypeError(f"bitwise-or all-reduce requires a bit payload, got {call.payload.dtype}")
            elif call.payload.dtype != np.float64:
                raise TypeError(f"{call.op.value} all-reduce requires float64 payloads, got {call.payload.dtype}")
        if isinstance(call, AllGather) and call.payload.dtype != np.float64:
            raise TypeError(f"all-gather requires float64 payloads, got {call.payload.dtype}")

    def _check_uniform(self, group: ProcessGroup, posted: dict[int, CollectiveCall]):
        calls = [posted[r] for r in group.members]
        first = calls[0]
        for c in calls[1:]:
            if type(c) is not type(first) or c.tag != first.tag or c.iteration != first.iteration:
                raise ProtocolError(
                    f"group {group.id}: mismatched collectives "
                    f"({type(first).__name__}:{first.tag} vs {type(c).__name__}:{c.tag})"
                )
        if isinstance(first, Broadcast):
            roots = {c.root for c in calls}
            if len(roots) != 1:
                raise ProtocolError(f"group {group.id}: broadcast roots disagree: {roots}")
        else:
            shapes = {posted[r].payload.shape for r in group.members}
            if len(shapes) != 1:
                raise ProtocolError(f"group {group.id}: payload shapes disagree on '{first.tag}': {shapes}")
        return first

    def _complete(self, group: ProcessGroup, posted: dict[int, CollectiveCall]) -> dict[int, Any]:
        first = self._check_uniform(group, posted)
        members = group.members
        g = len(members)

        if isinstance(first, Broadcast):
            root_payload = posted[first.root].payload
            if root_payload is None:
                raise ProtocolError(f"broadcast root {first.root} supplied no payload for '{first.tag}'")
            if g > 1:
                self.ledger.append(
                    LedgerEntry(
                        iteration=first.iteration,
                        group=group.id,
                        scope=group.scope.value,
                        op="broadcast",
                        elements=root_payload.size,
                        bytes=root_payload.size * ELEMENT_BYTES * (g - 1),
                        members=g,
                        label=first.tag,
                    )
                )
            return {r: root_payload.copy() for r in members}

        if isinstance(first, AllGather):
            gathered = [posted[r].payload.copy() for r in members]
            self.ledger.append(
                LedgerEntry(
                    iteration=first.iteration,
                    group=group.id,
                    scope=group.scope.value,
                    op="allgather",
                    elements=first.payload.size,
                    bytes=first.payload.size * ELEMENT_BYTES,
                    members=g,
                    label=first.tag,
                )
            )
            return {r: [arr.copy() for arr in gathered] for r in members}

        # all-reduce: serial fold in member (rank) order
        acc = posted[members[0]].payload.copy()
        if first.op is ReduceOp.BITWISE_OR:
            for r in members[1:]:
                acc = np.logical_or(acc, posted[r].payload)
        else:
            for r in members[1:]:
                acc = acc + posted[r].payload
            if first.op is ReduceOp.AVG:
                acc = acc / float(g)
        self.ledger.append(
            LedgerEntry(
                iteration=first.iteration,
                group=group.id,
                scope=group.scope.value,
                op=f"allreduce_{first.op.value}",
                elements=first.payload.size,
                bytes=first.payload.size * ELEMENT_BYTES,
                members=g,
                label=first.tag,
                detail=first.detail,
            )
        )
        return {r: acc.copy() for r in members}
