"""Split a layer sequence into neural blocks and place them along a UPF chain."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Sequence

from .modelgraph import LayerKind, ModelGraph, ValidationError, VolumeProfile, profile as profile_graph

SERVER = "SERVER"


class InfeasibleError(ValueError):
    pass


def upf(i: int) -> str:
    return f"UPF_{i}"


@dataclass(frozen=True)
class NeuralBlock:
    id: int
    first: int
    last: int
    param_count: int
    mac_count: int
    output_volume_bytes: int
    emits_skip: tuple[tuple[int, int], ...] = ()
    consumes_skip: tuple[tuple[int, int], ...] = ()

    @property
    def layer_range(self) -> tuple[int, int]:
        return (self.first, self.last)

    def __contains__(self, layer_id: int) -> bool:
        return self.first <= layer_id <= self.last


@dataclass(frozen=True)
class SplitPlan:
    blocks: tuple[NeuralBlock, ...]
    provenance: dict[int, str] = field(default_factory=dict)
    merged_to_server: frozenset[int] = frozenset()

    @property
    def boundaries(self) -> tuple[int, ...]:
        """Layer ids after which a block ends (excluding the final layer)."""
        return tuple(b.last for b in self.blocks[:-1])

    @property
    def n_layers(self) -> int:
        return self.blocks[-1].last + 1

    def block_of(self, layer_id: int) -> NeuralBlock:
        for block in self.blocks:
            if layer_id in block:
                return block
        raise KeyError(layer_id)

    def block(self, block_id: int) -> NeuralBlock:
        return self.blocks[block_id - 1]

    def validate_for(self, graph: ModelGraph | VolumeProfile) -> None:
        n = len(graph) if isinstance(graph, ModelGraph) else graph.n_layers
        expected = 0
        for i, block in enumerate(self.blocks, start=1):
            if block.id != i or block.first != expected or block.last < block.first:
                raise ValidationError("plan", f"block {block.id} range {block.layer_range} breaks the partition")
            expected = block.last + 1
        if expected != n:
            raise ValidationError("plan", f"blocks cover {expected} of {n} layers")
        if self.merged_to_server:
            pinned = sorted(self.merged_to_server)
            if pinned != list(range(len(self.blocks) - len(pinned) + 1, len(self.blocks) + 1)):
                raise ValidationError("plan", "server-pinned blocks must form the tail")


def make_plan(
    prof: VolumeProfile,
    boundaries: Sequence[int],
    provenance: dict[int, str] | None = None,
    merged_to_server: Sequence[int] | frozenset[int] = (),
) -> SplitPlan:
    """Build a plan from block-ending layer ids (``b`` means a cut after layer ``b``)."""
    n = prof.n_layers
    cuts = sorted(set(boundaries))
    if any(not 0 <= b < n - 1 for b in cuts):
        raise ValidationError("boundaries", f"cut positions must lie in [0, {n - 2}]")
    starts = [0, *(b + 1 for b in cuts)]
    ends = [*cuts, n - 1]
    blocks = []
    for i, (first, last) in enumerate(zip(starts, ends), start=1):
        blocks.append(
            NeuralBlock(
                id=i,
                first=first,
                last=last,
                param_count=prof.block_params(first, last),
                mac_count=sum(prof.mac_counts[first : last + 1]),
                output_volume_bytes=prof.layer_volumes[last],
                emits_skip=tuple(e for e in prof.skip_edges if first <= e[0] <= last and e[1] > last),
                consumes_skip=tuple(e for e in prof.skip_edges if first <= e[1] <= last and e[0] < first),
            )
        )
    prov = {b: (provenance or {}).get(b, "manual") for b in cuts}
    return SplitPlan(tuple(blocks), prov, frozenset(merged_to_server))


def plan_from_ranges(prof: VolumeProfile, ranges: Sequence[tuple[int, int]]) -> SplitPlan:
    plan = make_plan(prof, [last for _, last in ranges[:-1]])
    if [b.layer_range for b in plan.blocks] != [tuple(r) for r in ranges]:
        raise ValidationError("plan", f"ranges {list(ranges)} do not partition the layers")
    return plan


# --------------------------------------------------------------------------
# Step 1: proportional partition


def _targets(total: int, weights: Sequence[float]) -> list[Fraction]:
    wsum = sum(Fraction(w) for w in weights)
    return [Fraction(w) / wsum * total for w in weights]


def max_relative_deviation(prof: VolumeProfile, boundaries: Sequence[int], weights: Sequence[float]) -> Fraction:
    """max_i |mass_i - target_i| / total_params, exact."""
    total = prof.total_params
    targets = _targets(total, weights)
    ends = [*boundaries, prof.n_layers - 1]
    prev = 0
    worst = Fraction(0)
    for end, target in zip(ends, targets):
        mass = prof.param_prefix[end] - prev
        prev = prof.param_prefix[end]
        worst = max(worst, abs(mass - target))
    return worst / total


def straddle_bound(prof: VolumeProfile, weights: Sequence[float]) -> Fraction:
    """Largest single-layer mass straddling any cumulative target, as a fraction of total.

    Nearest-prefix rounding of each cumulative target misses it by at most half
    the straddling layer, so a block deviates by at most the heavier of the two
    layers straddling its ends.
    """
    total = prof.total_params
    cum = Fraction(0)
    worst = 0
    for t in _targets(total, weights)[:-1]:
        cum += t
        for i, p in enumerate(prof.param_counts):
            lo = prof.param_prefix[i] - p
            if lo < cum < prof.param_prefix[i]:
                worst = max(worst, p)
    return Fraction(worst, total)


def _greedy_walk(prefix: Sequence[int], targets: Sequence[Fraction]) -> list[int]:
    """Place each cut at the prefix nearest its cumulative target (earlier on ties),
    keeping at least one layer per remaining block."""
    n, k = len(prefix), len(targets)
    cuts: list[int] = []
    cum = Fraction(0)
    lo = 0
    for j in range(k - 1):
        cum += targets[j]
        hi = n - (k - j)  # leave one layer for each later block
        pos = bisect.bisect_left(prefix, cum, lo, hi + 1)
        candidates = [c for c in (pos - 1, pos) if lo <= c <= hi]
        best = min(candidates, key=lambda c: (abs(prefix[c] - cum), c))
        cuts.append(best)
        lo = best + 1
    return cuts


def _feasible_cuts(prefix: Sequence[int], targets: Sequence[Fraction], eps: Fraction) -> list[int] | None:
    """Earliest cuts with every block within ``eps * total`` of its target, or None."""
    n, k = len(prefix), len(targets)
    total = prefix[-1]
    tol = eps * total

    def mass(start: int, end: int) -> int:
        return prefix[end] - (prefix[start - 1] if start else 0)

    # ok[j][s]: blocks j..k-1 can cover layers s..n-1.
    ok = [[False] * (n + 1) for _ in range(k + 1)]
    ok[k][n] = True
    for j in range(k - 1, -1, -1):
        for s in range(n - 1, -1, -1):
            ok[j][s] = any(
                ok[j + 1][e + 1] and abs(mass(s, e) - targets[j]) <= tol for e in range(s, n - (k - j - 1))
            )
    if not ok[0][0]:
        return None
    cuts, s = [], 0
    for j in range(k - 1):
        e = next(e for e in range(s, n) if ok[j + 1][e + 1] and abs(mass(s, e) - targets[j]) <= tol)
        cuts.append(e)
        s = e + 1
    return cuts


def _polish(prefix: Sequence[int], targets: Sequence[Fraction], cuts: list[int]) -> list[int]:
    """Tighten the greedy cuts to the smallest achievable max deviation."""
    n, k = len(prefix), len(targets)
    total = prefix[-1]
    starts_mass = [0, *prefix]
    candidates = sorted(
        {
            abs(Fraction(starts_mass[e + 1] - starts_mass[s]) - targets[j]) / total
            for j in range(k)
            for s in range(j, n)
            for e in range(s, n)
        }
    )
    greedy_dev = Fraction(0)
    prev = 0
    for end, t in zip([*cuts, n - 1], targets):
        greedy_dev = max(greedy_dev, abs(prefix[end] - prev - t) / total)
        prev = prefix[end]
    hi = bisect.bisect_right(candidates, greedy_dev) - 1
    lo = 0
    best = _feasible_cuts(prefix, targets, candidates[hi])
    while lo < hi:
        mid = (lo + hi) // 2
        found = _feasible_cuts(prefix, targets, candidates[mid])
        if found is None:
            lo = mid + 1
        else:
            hi, best = mid, found
    return best if best is not None else cuts


def partition_proportional(prof: VolumeProfile, weights: Sequence[float]) -> SplitPlan:
    k = len(weights)
    if k < 1:
        raise InfeasibleError("need at least one block")
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise InfeasibleError("capacity weights must be nonnegative with a positive sum")
    if k > prof.n_layers:
        raise InfeasibleError(f"{k} blocks requested for {prof.n_layers} layers")
    if prof.total_params <= 0:
        raise InfeasibleError("model has no parameters to distribute")
    targets = _targets(prof.total_params, weights)
    cuts = _greedy_walk(prof.param_prefix, targets)
    cuts = _polish(prof.param_prefix, targets, cuts)
    return make_plan(prof, cuts, {b: "step1" for b in cuts})


# --------------------------------------------------------------------------
# Step 2: traffic-aware adjustment


def explosion_boundaries(prof: VolumeProfile, factor: float) -> list[int]:
    """Boundaries after the last separation layer whose volume reaches
    ``factor`` times the smallest boundary volume."""
    last_sep = prof.last_separation_layer()
    vols = prof.boundary_volumes
    if last_sep is None or not vols:
        return []
    floor = min(vols)
    return [b for b in range(last_sep, len(vols)) if vols[b] >= factor * floor]


def adjust_boundaries(
    plan: SplitPlan,
    prof: VolumeProfile,
    window: int = 2,
    lam: float = 1.0,
    *,
    weights: Sequence[float] | None = None,
    explosion_factor: float | None = 2.0,
    mask_to_server: bool = True,
) -> SplitPlan:
    """Move each cut within ``window`` layers to minimise
    ``volume / median_volume + lam * imbalance``, then pin the exploding tail.

    ``imbalance`` is the plan's max relative parameter deviation after the
    move.  The tail starting at the first explosion boundary is split off and
    pinned to the server; with ``mask_to_server`` the cut goes before the layer
    producing the explosion so that the expanded tensor never leaves the server.
    """
    if window < 0 or lam < 0:
        raise ValueError("window and lam must be nonnegative")
    weights = list(weights) if weights is not None else [1.0] * len(plan.blocks)
    median = Fraction(prof.median_boundary_volume()) or Fraction(1)
    cuts = list(plan.boundaries)
    provenance = dict(plan.provenance)
    n = prof.n_layers
    for i, b in enumerate(cuts):
        lo = max(b - window, cuts[i - 1] + 1 if i else 0)
        hi = min(b + window, cuts[i + 1] - 1 if i + 1 < len(cuts) else n - 2)

        def cost(c: int) -> Fraction:
            trial = cuts[:i] + [c] + cuts[i + 1 :]
            return Fraction(prof.boundary_volumes[c]) / median + Fraction(lam) * max_relative_deviation(prof, trial, weights)

        best = min(range(lo, hi + 1), key=lambda c: (cost(c), c))
        if best != b:
            cuts[i] = best
            provenance.pop(b, None)
            provenance[best] = "step2-moved"

    old_pins = [plan.block(i).first for i in plan.merged_to_server]
    pinned_from: int | None = min(old_pins) if old_pins else None
    if explosion_factor is not None:
        hits = explosion_boundaries(prof, explosion_factor)
        if hits:
            cut = hits[0] - 1 if mask_to_server else hits[0]
            if cut >= 0:
                if cut not in cuts:
                    cuts.append(cut)
                    provenance[cut] = "step2-merge"
                pinned_from = cut + 1 if pinned_from is None else min(pinned_from, cut + 1)
    merged = make_plan(prof, cuts, provenance)
    pinned = frozenset(b.id for b in merged.blocks if pinned_from is not None and b.first >= pinned_from)
    return replace(merged, merged_to_server=pinned)


def without_explosion_merge(plan: SplitPlan, prof: VolumeProfile, explosion_factor: float = 2.0) -> SplitPlan:
    """The plan as if the explosion merge had not been applied.

    Layers at the head of the first pinned block, up to and including the first
    one whose output is an explosion boundary, rejoin the preceding block (and so
    run on that block's node).
    """
    if not plan.merged_to_server:
        return plan
    head = plan.block(min(plan.merged_to_server))
    if head.id == 1:
        return plan
    hits = [b for b in explosion_boundaries(prof, explosion_factor) if head.first <= b <= head.last]
    if not hits:
        return plan
    move_through = hits[0]
    cuts = [c for c in plan.boundaries if c != head.first - 1]
    provenance = {c: p for c, p in plan.provenance.items() if c in cuts}
    if move_through < head.last:
        cuts.append(move_through)
        provenance[move_through] = "unmerged"
    out = make_plan(prof, cuts, provenance)
    pinned_from = move_through + 1
    pinned = frozenset(b.id for b in out.blocks if b.first >= pinned_from)
    return replace(out, merged_to_server=pinned)


# --------------------------------------------------------------------------
# Step 3: skip parallelisation


def parallelize_skips(plan: SplitPlan, prof: VolumeProfile) -> SplitPlan:
    cuts = set(plan.boundaries)
    provenance = dict(plan.provenance)
    for producer, consumer in prof.skip_edges:
        block = plan.block_of(producer)
        if producer < block.last:
            cuts.add(producer)
            provenance[producer] = "step3"
    if cuts == set(plan.boundaries):
        return plan
    out = make_plan(prof, sorted(cuts), provenance)
    pinned_layers = [plan.block(i).first for i in plan.merged_to_server]
    pinned_from = min(pinned_layers) if pinned_layers else None
    pinned = frozenset(b.id for b in out.blocks if pinned_from is not None and b.first >= pinned_from)
    return replace(out, merged_to_server=pinned)


# --------------------------------------------------------------------------
# Placement


@dataclass(frozen=True)
class Placement:
    assignment: dict[int, str]
    hops: int
    delta: int

    @property
    def server_blocks(self) -> list[int]:
        return [b for b, node in self.assignment.items() if node == SERVER]

    def blocks_on(self, node: str) -> list[int]:
        return [b for b, n in self.assignment.items() if n == node]

    def node_index(self, block_id: int) -> int:
        node = self.assignment[block_id]
        return self.hops + 1 if node == SERVER else int(node.split("_")[1])


def place(plan: SplitPlan, hops: int, delta: int) -> Placement:
    """Block 1 alone on UPF_1; further unpinned blocks spread as evenly as
    possible over UPF_2..UPF_H with at most ``delta`` each; the remainder,
    the last block and every pinned block go to the server."""
    if hops < 1:
        raise ValueError("need at least one hop")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    n = len(plan.blocks)
    assignment = {b.id: SERVER for b in plan.blocks}
    if delta == 0 or n < 2 or 1 in plan.merged_to_server:
        return Placement(assignment, hops, delta)
    assignment[1] = upf(1)
    movable = [b.id for b in plan.blocks[1:-1] if b.id not in plan.merged_to_server]
    # movable is contiguous from block 2: pinned blocks form the tail.
    slots = hops - 1
    n_net = min(len(movable), delta * slots)
    if slots and n_net:
        base, extra = divmod(n_net, slots)
        it = iter(movable[:n_net])
        for j in range(slots):
            for _ in range(base + (1 if j < extra else 0)):
                assignment[next(it)] = upf(j + 2)
    return Placement(assignment, hops, delta)


# --------------------------------------------------------------------------
# End to end


@dataclass(frozen=True)
class PlanOptions:
    initial_blocks: int | None = None
    window: int = 2
    lam: float = 1.0
    explosion_factor: float | None = 2.0
    mask_to_server: bool = True
    parallelize: bool = True


def default_initial_blocks(prof: VolumeProfile, hops: int, delta: int) -> int:
    if LayerKind.MASK_CONV in prof.kinds and LayerKind.ENCODER in prof.kinds:
        return min(8, prof.n_layers)
    usable = (1 if delta >= 1 else 0) + delta * (hops - 1)
    return max(1, min(prof.n_layers, usable + 1))


def plan_full(
    prof: VolumeProfile | ModelGraph,
    hops: int,
    delta: int,
    options: PlanOptions = PlanOptions(),
) -> tuple[SplitPlan, Placement]:
    if isinstance(prof, ModelGraph):
        prof = profile_graph(prof)
    k = options.initial_blocks or default_initial_blocks(prof, hops, delta)
    weights = [1.0] * k
    plan = partition_proportional(prof, weights)
    plan = adjust_boundaries(
        plan,
        prof,
        options.window,
        options.lam,
        weights=weights,
        explosion_factor=options.explosion_factor,
        mask_to_server=options.mask_to_server,
    )
    if options.parallelize:
        plan = parallelize_skips(plan, prof)
    return plan, place(plan, hops, delta)


# --------------------------------------------------------------------------
# Serialisation


def plan_to_dict(plan: SplitPlan, placement: Placement | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {
        "blocks": [
            {"id": b.id, "first": b.first, "last": b.last, "params": b.param_count, "out_bytes": b.output_volume_bytes}
            for b in plan.blocks
        ],
        "merged_to_server": sorted(plan.merged_to_server),
        "provenance": {str(k): plan.provenance[k] for k in sorted(plan.provenance)},
    }
    if placement is not None:
        out["hops"] = placement.hops
        out["delta"] = placement.delta
        out["placement"] = {str(k): placement.assignment[k] for k in sorted(placement.assignment)}
    return out


def dumps_plan(plan: SplitPlan, placement: Placement | None = None) -> str:
    return json.dumps(plan_to_dict(plan, placement), indent=2) + "\n"


def plan_from_dict(data: dict[str, Any], prof: VolumeProfile) -> tuple[SplitPlan, Placement | None]:
    ranges = [(b["first"], b["last"]) for b in data["blocks"]]
    plan = plan_from_ranges(prof, ranges)
    prov = {int(k): v for k, v in data.get("provenance", {}).items()}
    plan = replace(plan, provenance=prov, merged_to_server=frozenset(data.get("merged_to_server", ())))
    placement = None
    if "placement" in data:
        placement = Placement({int(k): v for k, v in data["placement"].items()}, data["hops"], data["delta"])
    return plan, placement
