"""Discrete-event simulation of client -> UPF chain -> server inference.

Time is kept in integer nanoseconds.  Links are store-and-forward at packet
granularity; a packet of ``n`` payload bytes occupies a link for
``ceil(8 n / bandwidth)`` and arrives ``prop_delay`` after it leaves.  Header
overhead is not modelled.

A node holding blocks waits until every remote input it needs is complete
(its sequential input plus skip payloads addressed to it), then runs its
blocks back to back and streams its last block's output to the next node
holding blocks.  ``cache_wait`` of a node runs from the first packet of its
sequential input to that barrier.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from enum import Enum
from typing import Iterable

from .modelgraph import ModelGraph, VolumeProfile, profile
from .planner import SERVER, Placement, SplitPlan, upf, without_explosion_merge

NS = 1_000_000_000


class SimError(ValueError):
    pass


class EventKind(str, Enum):
    PACKET_ARRIVE = "PacketArrive"
    CACHE_COMPLETE = "CacheComplete"
    COMPUTE_START = "ComputeStart"
    COMPUTE_END = "ComputeEnd"
    TRANSMIT_START = "TransmitStart"
    TRANSMIT_END = "TransmitEnd"


@dataclass(frozen=True)
class Topology:
    hops: int
    bandwidth_bps: float = 1e9
    prop_delay_s: float = 0.010
    mtu_payload_bytes: int = 1472
    compute_rate_macs_per_s: float = 1e9
    client_payload_bytes: int | None = None
    link_policy: str = "round_robin"

    def validate(self) -> None:
        if self.hops < 1:
            raise SimError("hops must be >= 1")
        if not self.bandwidth_bps > 0:
            raise SimError("bandwidth_bps must be positive")
        if not self.compute_rate_macs_per_s > 0:
            raise SimError("compute_rate_macs_per_s must be positive")
        if self.prop_delay_s < 0:
            raise SimError("prop_delay_s must be nonnegative")
        if self.mtu_payload_bytes < 1:
            raise SimError("mtu_payload_bytes must be positive")
        if self.client_payload_bytes is not None and self.client_payload_bytes < 1:
            raise SimError("client_payload_bytes must be positive")
        if self.link_policy not in ("round_robin", "fifo"):
            raise SimError(f"unknown link policy {self.link_policy!r}")


RAW_BYTES_PER_SAMPLE = 2


def client_payload(prof: VolumeProfile, topology: Topology) -> int:
    """16-bit samples unless the topology overrides it."""
    if topology.client_payload_bytes is not None:
        return topology.client_payload_bytes
    return prof.input_frames * RAW_BYTES_PER_SAMPLE


@dataclass(frozen=True)
class AblationFlags:
    principle2: bool = True
    principle3: bool = True


@dataclass(frozen=True)
class SimEvent:
    time_ns: int
    kind: EventKind
    node: str
    id: str

    @property
    def time_s(self) -> float:
        return self.time_ns / NS


@dataclass
class NodeStats:
    blocks: tuple[int, ...] = ()
    first_arrival_ns: int | None = None
    cache_complete_ns: int | None = None
    compute_start_ns: int | None = None
    compute_end_ns: int | None = None
    compute_ns: int = 0
    packets_cached: int = 0
    bytes_cached: int = 0

    @property
    def cache_wait_ns(self) -> int:
        if self.cache_complete_ns is None or self.first_arrival_ns is None:
            return 0
        return self.cache_complete_ns - self.first_arrival_ns

    @property
    def cache_wait_s(self) -> float:
        return self.cache_wait_ns / NS

    @property
    def compute_s(self) -> float:
        return self.compute_ns / NS


@dataclass
class StreamRecord:
    """One transfer between two nodes; ``segments`` are (kind, bytes) in send order."""

    id: str
    src: int
    dst: int
    segments: tuple[tuple[str, int], ...]
    packets: list[tuple[int, str]]
    start_ns: int | None = None
    first_arrival_ns: int | None = None
    last_arrival_ns: int | None = None
    received: int = 0

    @property
    def bytes(self) -> int:
        return sum(b for _, b in self.segments)

    @property
    def complete(self) -> bool:
        return self.received == len(self.packets)


@dataclass
class SimTrace:
    events: list[SimEvent]
    node_names: tuple[str, ...]
    per_link_bytes: tuple[int, ...]
    per_link_bytes_by_kind: tuple[dict[str, int], ...]
    per_link_packets: tuple[int, ...]
    nodes: dict[str, NodeStats]
    streams: list[StreamRecord]
    completion_time_ns: int
    plan: SplitPlan
    placement: Placement
    prop_delay_ns: int = 0

    @property
    def completion_time_s(self) -> float:
        return self.completion_time_ns / NS

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time_ns", "kind", "node", "id"])
        for ev in self.events:
            writer.writerow([ev.time_ns, ev.kind.value, ev.node, ev.id])
        return buf.getvalue()


def _as_profile(prof: VolumeProfile | ModelGraph) -> VolumeProfile:
    return profile(prof) if isinstance(prof, ModelGraph) else prof


def calibrate_rate(prof: VolumeProfile | ModelGraph, topology: Topology | None, target_s: float) -> float:
    """Compute rate making a fully centralised run compute for ``target_s``."""
    prof = _as_profile(prof)
    if not target_s > 0:
        raise SimError("calibration target must be positive")
    if prof.total_macs <= 0:
        raise SimError("profile has no MACs to calibrate against")
    return prof.total_macs / target_s


def _packetize(segments: Iterable[tuple[str, int]], mtu: int) -> list[tuple[int, str]]:
    packets = []
    for kind, nbytes in segments:
        full, rest = divmod(nbytes, mtu)
        packets.extend([(mtu, kind)] * full)
        if rest:
            packets.append((rest, kind))
    return packets


@dataclass
class _Link:
    queues: dict[int, deque] = field(default_factory=dict)
    order: list[int] = field(default_factory=list)
    last: int = -1
    busy: bool = False
    fifo: deque = field(default_factory=deque)

    def push(self, stream: int, pkt: int, policy: str) -> None:
        if policy == "fifo":
            self.fifo.append((stream, pkt))
            return
        if stream not in self.queues:
            self.queues[stream] = deque()
            self.order.append(stream)
        self.queues[stream].append(pkt)

    def pop(self, policy: str) -> tuple[int, int] | None:
        if policy == "fifo":
            return self.fifo.popleft() if self.fifo else None
        n = len(self.order)
        start = (self.order.index(self.last) + 1) if self.last in self.queues else 0
        for k in range(n):
            sid = self.order[(start + k) % n]
            if self.queues[sid]:
                self.last = sid
                return sid, self.queues[sid].popleft()
        return None


def _remap_placement(old: SplitPlan, new: SplitPlan, placement: Placement) -> Placement:
    assignment = {b.id: placement.assignment[old.block_of(b.first).id] for b in new.blocks}
    return Placement(assignment, placement.hops, placement.delta)


class _Simulator:
    def __init__(self, prof: VolumeProfile, plan: SplitPlan, placement: Placement, topo: Topology, flags: AblationFlags):
        self.prof, self.plan, self.placement, self.topo, self.flags = prof, plan, placement, topo, flags
        H = topo.hops
        self.names = ("CLIENT", *(upf(i) for i in range(1, H + 1)), SERVER)
        self.node_of = {b.id: placement.node_index(b.id) for b in plan.blocks}
        self.bw = Fraction(topo.bandwidth_bps)
        self.prop = round(topo.prop_delay_s * NS)
        self.rate = Fraction(topo.compute_rate_macs_per_s)
        self.links = [_Link() for _ in range(H + 1)]
        self.link_bytes = [0] * (H + 1)
        self.link_kind_bytes: list[dict[str, int]] = [{} for _ in range(H + 1)]
        self.link_packets = [0] * (H + 1)
        self.events: list[SimEvent] = []
        self.heap: list = []
        self.counter = 0
        self.streams: list[StreamRecord] = []
        self.nodes = {name: NodeStats() for name in self.names}
        self._build()

    # -- setup -------------------------------------------------------------
    def _stream(self, sid: str, src: int, dst: int, segments: list[tuple[str, int]]) -> int:
        segs = tuple((k, b) for k, b in segments if b > 0)
        rec = StreamRecord(sid, src, dst, segs, _packetize(segs, self.topo.mtu_payload_bytes))
        self.streams.append(rec)
        return len(self.streams) - 1

    def _build(self) -> None:
        plan, prof = self.plan, self.prof
        chain: list[int] = []
        for b in plan.blocks:
            n = self.node_of[b.id]
            if not chain or chain[-1] != n:
                chain.append(n)
        if chain != sorted(chain) or len(set(chain)) != len(chain):
            raise SimError("placement does not preserve block order along the path")
        self.chain = chain
        self.node_blocks = {n: [b for b in plan.blocks if self.node_of[b.id] == n] for n in chain}
        for n in chain:
            self.nodes[self.names[n]].blocks = tuple(b.id for b in self.node_blocks[n])
        self.required: dict[int, list[int]] = {n: [] for n in chain}
        self.seq_in: dict[int, int] = {}
        self.out_stream: dict[int, int] = {}
        self.skip_streams: dict[int, list[int]] = {}  # block id -> streams started at its end

        # Skip payloads carried in sequential streams when parallel forwarding is off.
        appended: dict[int, list[tuple[str, int]]] = {n: [] for n in chain}
        for edge, vol in prof.skip_volumes.items():
            src = self.node_of[plan.block_of(edge[0]).id]
            dst = self.node_of[plan.block_of(edge[1]).id]
            if src == dst:
                continue
            if self.flags.principle3:
                sid = self._stream(f"skip:{edge[0]}-{edge[1]}", src, dst, [("skip", vol)])
                self.required[dst].append(sid)
                self.skip_streams.setdefault(plan.block_of(edge[0]).id, []).append(sid)
            else:
                for n in chain[chain.index(src) : chain.index(dst)]:
                    appended[n].append(("skip", vol))

        raw = self._stream("raw", 0, chain[0], [("raw", client_payload(prof, self.topo))])
        self.required[chain[0]].append(raw)
        self.seq_in[chain[0]] = raw
        for src, dst in zip(chain, chain[1:]):
            last = self.node_blocks[src][-1]
            sid = self._stream(
                f"seq:{self.names[src]}", src, dst, [("seq", last.output_volume_bytes), *appended[src]]
            )
            self.required[dst].append(sid)
            self.seq_in[dst] = sid
            self.out_stream[src] = sid

    # -- event plumbing ----------------------------------------------------
    def _at(self, t: int, action: str, *args) -> None:
        heapq.heappush(self.heap, (t, self.counter, action, args))
        self.counter += 1

    def _log(self, t: int, kind: EventKind, node: int, ident: str) -> None:
        self.events.append(SimEvent(t, kind, self.names[node], ident))

    def _tx_ns(self, nbytes: int) -> int:
        return math.ceil(nbytes * 8 * NS / self.bw)

    def _start_stream(self, t: int, sid: int) -> None:
        rec = self.streams[sid]
        rec.start_ns = t
        link = rec.src
        for pkt in range(len(rec.packets)):
            self.links[link].push(sid, pkt, self.topo.link_policy)
        self._serve(t, link)

    def _serve(self, t: int, link: int) -> None:
        state = self.links[link]
        if state.busy:
            return
        nxt = state.pop(self.topo.link_policy)
        if nxt is None:
            return
        sid, pkt = nxt
        nbytes, kind = self.streams[sid].packets[pkt]
        state.busy = True
        self.link_bytes[link] += nbytes
        self.link_packets[link] += 1
        self.link_kind_bytes[link][kind] = self.link_kind_bytes[link].get(kind, 0) + nbytes
        ident = f"{self.streams[sid].id}#{pkt}"
        self._log(t, EventKind.TRANSMIT_START, link, ident)
        self._at(t + self._tx_ns(nbytes), "tx_end", link, sid, pkt)

    def _tx_end(self, t: int, link: int, sid: int, pkt: int) -> None:
        self._log(t, EventKind.TRANSMIT_END, link, f"{self.streams[sid].id}#{pkt}")
        self.links[link].busy = False
        self._at(t + self.prop, "arrive", link + 1, sid, pkt)
        self._serve(t, link)

    def _arrive(self, t: int, node: int, sid: int, pkt: int) -> None:
        rec = self.streams[sid]
        self._log(t, EventKind.PACKET_ARRIVE, node, f"{rec.id}#{pkt}")
        if node != rec.dst:
            self.links[node].push(sid, pkt, self.topo.link_policy)
            self._serve(t, node)
            return
        if rec.first_arrival_ns is None:
            rec.first_arrival_ns = t
        rec.last_arrival_ns = t
        rec.received += 1
        stats = self.nodes[self.names[node]]
        stats.packets_cached += 1
        stats.bytes_cached += rec.packets[pkt][0]
        if sid == self.seq_in.get(node) and stats.first_arrival_ns is None:
            stats.first_arrival_ns = t
        if rec.complete and all(self.streams[s].complete for s in self.required[node]):
            self._compute(t, node)

    def _compute(self, t: int, node: int) -> None:
        stats = self.nodes[self.names[node]]
        blocks = self.node_blocks[node]
        stats.cache_complete_ns = t
        self._log(t, EventKind.CACHE_COMPLETE, node, f"block{blocks[0].id}")
        stats.compute_start_ns = t
        cum = 0
        start = t
        for block in blocks:
            cum += block.mac_count
            end = t + round(Fraction(cum) * NS / self.rate)
            self._at(start, "log", EventKind.COMPUTE_START, node, f"block{block.id}")
            self._at(end, "block_end", node, block.id)
            start = end
        stats.compute_end_ns = start
        stats.compute_ns = start - t

    def _block_end(self, t: int, node: int, block_id: int) -> None:
        self._log(t, EventKind.COMPUTE_END, node, f"block{block_id}")
        for sid in self.skip_streams.get(block_id, ()):
            self._start_stream(t, sid)
        if block_id == self.node_blocks[node][-1].id and node in self.out_stream:
            self._start_stream(t, self.out_stream[node])

    def run(self) -> SimTrace:
        self._start_stream(0, self.seq_in[self.chain[0]])
        while self.heap:
            t, _, action, args = heapq.heappop(self.heap)
            if action == "tx_end":
                self._tx_end(t, *args)
            elif action == "arrive":
                self._arrive(t, *args)
            elif action == "block_end":
                self._block_end(t, *args)
            elif action == "log":
                self._log(t, args[0], args[1], args[2])
        server = self.nodes[SERVER]
        if server.compute_end_ns is None:
            raise SimError("simulation ended before the server finished")
        return SimTrace(
            events=self.events,
            node_names=self.names,
            per_link_bytes=tuple(self.link_bytes),
            per_link_bytes_by_kind=tuple(self.link_kind_bytes),
            per_link_packets=tuple(self.link_packets),
            nodes=self.nodes,
            streams=self.streams,
            completion_time_ns=max(ev.time_ns for ev in self.events),
            plan=self.plan,
            placement=self.placement,
            prop_delay_ns=self.prop,
        )


def simulate(
    prof: VolumeProfile | ModelGraph,
    plan: SplitPlan,
    placement: Placement,
    topology: Topology,
    flags: AblationFlags = AblationFlags(),
) -> SimTrace:
    """Run one inference job through the placed plan."""
    prof = _as_profile(prof)
    topology.validate()
    plan.validate_for(prof)
    if placement.hops != topology.hops:
        raise SimError(f"placement is for {placement.hops} hops, topology has {topology.hops}")
    if set(placement.assignment) != {b.id for b in plan.blocks}:
        raise SimError("placement does not cover the plan's blocks")
    if placement.assignment[plan.blocks[-1].id] != SERVER:
        raise SimError("the last block must run on the server")
    if not flags.principle2:
        unmerged = without_explosion_merge(plan, prof)
        placement = _remap_placement(plan, unmerged, placement)
        plan = unmerged
    return _Simulator(prof, plan, placement, topology, flags).run()
