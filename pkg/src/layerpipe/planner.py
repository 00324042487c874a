"""Analytic stage cost model, greedy DSP-budgeted balancing and buffer sizing.

Every node is one pipeline stage that emits one output line (``1 x W x C``) per
job. Convolutions spend one cycle per aligned stream entry plus a fixed
per-line overhead; everything else spends ``ceil(C / lane_width)`` cycles plus
the same overhead. A convolution with ``S`` channel splits uses ``W * S``
multipliers, two per DSP block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .graph import CONV_KINDS, Graph, GraphError, OpKind, infer_shapes, node_kernel, topo_order
from .interp import quantized_weights
from .sparsity import CountCache

DEFAULT_OVERHEAD = 4
DEFAULT_RL_BITS = 8
PIPE_CONST = 2  # multiplier chain latency beyond ceil(S/2)

BUFFERED_KINDS = frozenset({OpKind.CONV2D, OpKind.DEPTHWISE, OpKind.MATMUL, OpKind.MAXPOOL, OpKind.ADD, OpKind.MEAN})
UNBUFFERED_KINDS = frozenset({OpKind.BIAS_ADD, OpKind.RELU, OpKind.RELU6})
HARDWARE_KINDS = BUFFERED_KINDS | UNBUFFERED_KINDS | {OpKind.PLACEHOLDER}


class PlanError(GraphError):
    pass


@dataclass
class LayerPlan:
    node_id: str
    kind: OpKind
    cycles_per_line: int
    cycles_per_image: int
    out_lines: int
    S: int = 1
    lane_width: int = 1
    multipliers: int = 0
    dsps: int = 0
    overhead: int = DEFAULT_OVERHEAD
    depths: tuple[int, ...] = ()
    required_depths: tuple[int, ...] = ()
    saturated: bool = False

    @property
    def buffered(self) -> bool:
        return self.kind in BUFFERED_KINDS

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "S": self.S,
            "lane_width": self.lane_width,
            "depths": list(self.depths),
            "required_depths": list(self.required_depths),
            "multipliers": self.multipliers,
            "dsps": self.dsps,
            "cycles_per_line": self.cycles_per_line,
            "cycles_per_image": self.cycles_per_image,
            "out_lines": self.out_lines,
            "overhead": self.overhead,
            "saturated": self.saturated,
        }

    @classmethod
    def from_json(cls, node_id: str, d: dict) -> "LayerPlan":
        return cls(node_id, OpKind(d["kind"]), int(d["cycles_per_line"]), int(d["cycles_per_image"]),
                   int(d["out_lines"]), int(d["S"]), int(d["lane_width"]), int(d["multipliers"]), int(d["dsps"]),
                   int(d["overhead"]), tuple(d["depths"]), tuple(d["required_depths"]), bool(d["saturated"]))


@dataclass
class PlanSet:
    plans: dict[str, LayerPlan]
    dsp_target: int
    overhead: int = DEFAULT_OVERHEAD
    rl_bits: int = DEFAULT_RL_BITS
    frequency_mhz: float = 300.0
    unbalanced_cycles: dict[str, int] = field(default_factory=dict)
    history: list[tuple[str, int, int]] = field(default_factory=list)  # (node, new S or lane, bottleneck cycles)

    def __getitem__(self, node_id: str) -> LayerPlan:
        return self.plans[node_id]

    @property
    def total_dsps(self) -> int:
        return sum(p.dsps for p in self.plans.values())

    @property
    def bottleneck(self) -> str:
        return max(sorted(self.plans), key=lambda k: self.plans[k].cycles_per_image)

    @property
    def bottleneck_cycles(self) -> int:
        return self.plans[self.bottleneck].cycles_per_image

    @property
    def images_per_second(self) -> float:
        return self.frequency_mhz * 1e6 / self.bottleneck_cycles

    def to_json(self) -> dict:
        return {
            "dsp_target": self.dsp_target,
            "overhead": self.overhead,
            "rl_bits": self.rl_bits,
            "frequency_mhz": self.frequency_mhz,
            "total_dsps": self.total_dsps,
            "bottleneck": self.bottleneck,
            "images_per_second": self.images_per_second,
            "nodes": {k: self.plans[k].to_json() for k in sorted(self.plans)},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, d: dict) -> "PlanSet":
        plans = {k: LayerPlan.from_json(k, v) for k, v in d["nodes"].items()}
        return cls(plans, int(d["dsp_target"]), int(d["overhead"]), int(d["rl_bits"]), float(d["frequency_mhz"]))


# ---------------------------------------------------------------------------
# cost model


def dsp_cost(node, S: int) -> tuple[int, int]:
    """(multipliers, DSP blocks) of a node at ``S`` channel splits."""
    if node.kind not in CONV_KINDS:
        return 0, 0
    mult = node.out_shape.w * S
    return mult, math.ceil(mult / 2)


def stage_cycles(node, counts: Optional[np.ndarray] = None, lane_width: int = 1,
                 overhead: int = DEFAULT_OVERHEAD, in_lines: Optional[int] = None) -> tuple[int, int]:
    """(cycles_per_line, cycles_per_image) of one stage.

    Convolutions need their aligned per-output-channel ``counts``. A Mean stage
    consumes every input line, so its per-image cost uses ``in_lines``.
    """
    if node.kind in CONV_KINDS:
        if counts is None:
            raise PlanError(f"node {node.id}: stream counts are required for {node.kind.value}")
        per_line = int(np.sum(counts)) + overhead
    elif node.kind in HARDWARE_KINDS:
        per_line = math.ceil(node.out_shape.c / lane_width) + overhead
    else:
        raise PlanError(f"node {node.id}: {node.kind.value} has no hardware stage; run the transforms first")
    lines = node.out_shape.h
    if node.kind is OpKind.MEAN:
        if in_lines is None:
            raise PlanError(f"node {node.id}: Mean needs its input height")
        lines = in_lines
    return per_line, lines * per_line


class _Costs:
    """Per-node cost evaluation shared by the balancer and the final plan."""

    def __init__(self, g: Graph, overhead: int, rl_bits: int, model: str):
        if model not in ("exact", "naive"):
            raise ValueError(f"unknown cost model {model!r}")
        self.g = g
        self.overhead = overhead
        self.model = model
        self.caches = {n.id: CountCache(quantized_weights(n), rl_bits, n.kind is OpKind.DEPTHWISE)
                       for n in g if n.kind in CONV_KINDS}

    def in_lines(self, node) -> Optional[int]:
        return self.g[node.inputs[0]].out_shape.h if node.inputs else None

    def entries(self, nid: str, S: int, model: Optional[str] = None) -> int:
        cache = self.caches[nid]
        if (model or self.model) == "naive":
            return math.ceil(cache.entries(1) / S)
        return cache.entries(S)

    def cycles(self, nid: str, S: int = 1, lane: int = 1, model: Optional[str] = None) -> tuple[int, int]:
        n = self.g[nid]
        counts = np.array([self.entries(nid, S, model)]) if n.kind in CONV_KINDS else None
        return stage_cycles(n, counts, lane, self.overhead, self.in_lines(n))

    def plan(self, nid: str, S: int, lane: int, model: Optional[str] = None) -> LayerPlan:
        n = self.g[nid]
        cpl, cpi = self.cycles(nid, S, lane, model)
        mult, dsps = dsp_cost(n, S)
        return LayerPlan(nid, n.kind, cpl, cpi, n.out_shape.h, S, lane, mult, dsps, self.overhead)


def _check_hardware(g: Graph) -> None:
    for n in g:
        if n.kind not in HARDWARE_KINDS:
            raise PlanError(f"node {n.id}: {n.kind.value} has no hardware stage; run the transforms first")


def plan_fixed(g: Graph, splits: dict[str, int], lanes: Optional[dict[str, int]] = None,
               dsp_target: Optional[int] = None, overhead: int = DEFAULT_OVERHEAD,
               rl_bits: int = DEFAULT_RL_BITS, frequency_mhz: float = 300.0) -> PlanSet:
    """Exact plan for explicitly chosen splits and lane widths."""
    g = infer_shapes(g)
    _check_hardware(g)
    costs = _Costs(g, overhead, rl_bits, "exact")
    lanes = lanes or {}
    plans = {n.id: costs.plan(n.id, splits.get(n.id, 1), lanes.get(n.id, 1)) for n in g}
    total = sum(p.dsps for p in plans.values())
    return PlanSet(plans, dsp_target if dsp_target is not None else total, overhead, rl_bits, frequency_mhz)


def balance(g: Graph, dsp_target: int, overhead: int = DEFAULT_OVERHEAD, rl_bits: int = DEFAULT_RL_BITS,
            model: str = "exact", frequency_mhz: float = 300.0) -> PlanSet:
    """Greedy throughput balancing toward ``dsp_target``.

    Starting from ``S = 1`` everywhere, repeatedly take the slowest stage
    (ties by id). A convolution moves to the smallest ``S' > S`` whose
    partition size differs and whose cost strictly drops, if the DSP total
    still fits; otherwise it is saturated. A non-convolution stage doubles its
    lane width. The loop ends when the slowest stage is saturated.

    ``model="naive"`` makes decisions with ``ceil(entries(S=1) / S)``; the
    returned plan always reports exact costs.
    """
    g = infer_shapes(g)
    _check_hardware(g)
    costs = _Costs(g, overhead, rl_bits, model)
    S = {n.id: 1 for n in g}
    lane = {n.id: 1 for n in g}
    cpi = {n.id: costs.cycles(n.id)[1] for n in g}
    dsps = {n.id: dsp_cost(n, 1)[1] for n in g}
    unbalanced = {n.id: costs.cycles(n.id, model="exact")[1] for n in g}
    base_total = sum(dsps.values())
    if dsp_target < base_total:
        raise PlanError(f"target infeasible: dsp target {dsp_target} is below the S=1 cost of {base_total} DSPs")
    saturated: set[str] = set()
    history: list[tuple[str, int, int]] = []
    total = base_total

    while True:
        nid = max(sorted(cpi), key=lambda k: cpi[k])
        if nid in saturated:
            break
        n = g[nid]
        if n.kind in CONV_KINDS:
            ci = n.weights.shape[2]
            cur_size = math.ceil(ci / S[nid])
            found = None
            for s2 in range(S[nid] + 1, ci + 1):
                size = math.ceil(ci / s2)
                if size == cur_size:
                    continue
                cur_size = size
                c2 = costs.cycles(nid, s2)[1]
                if c2 < cpi[nid]:
                    found = (s2, c2)
                    break
            if found is None:
                saturated.add(nid)
                continue
            s2, c2 = found
            d2 = dsp_cost(n, s2)[1]
            if total - dsps[nid] + d2 > dsp_target:
                saturated.add(nid)
                continue
            total += d2 - dsps[nid]
            S[nid], dsps[nid], cpi[nid] = s2, d2, c2
            assert total <= dsp_target
            history.append((nid, s2, max(cpi.values())))
        else:
            c = n.out_shape.c
            if lane[nid] >= c:
                saturated.add(nid)
                continue
            lane[nid] = min(2 * lane[nid], c)
            cpi[nid] = costs.cycles(nid, 1, lane[nid])[1]
            history.append((nid, lane[nid], max(cpi.values())))

    plans = {}
    for n in g:
        p = costs.plan(n.id, S[n.id], lane[n.id], model="exact")
        p.saturated = n.id in saturated
        plans[n.id] = p
    return PlanSet(plans, dsp_target, overhead, rl_bits, frequency_mhz, unbalanced, history)


# ---------------------------------------------------------------------------
# buffer depths


def base_depth(node) -> int:
    """Smallest input buffer depth in lines for a buffered stage."""
    return node_kernel(node).kh + 2


def emit_delay(plan: LayerPlan, pipe_const: int = PIPE_CONST) -> int:
    """Cycles from the start of a line to its delivery downstream."""
    if plan.kind in CONV_KINDS:
        return plan.cycles_per_line + math.ceil(plan.S / 2) + pipe_const
    return plan.cycles_per_line


def _line_source(g: Graph, plans: PlanSet, u: str) -> tuple[str, int]:
    """Buffered (or source) stage feeding ``u`` through unbuffered stages, and the line latency."""
    extra = 0
    while g[u].kind in UNBUFFERED_KINDS:
        extra += plans[u].cycles_per_line
        u = g[u].inputs[0]
    return u, emit_delay(plans[u]) + extra


def port_depth(g: Graph, plans: PlanSet, nid: str, p: int) -> int:
    """Input depth that lets a stage run at its producer's rate.

    Besides the window (``k_h``), the lines of the next row (``s_h``) and the
    top padding written at an image boundary, the buffer has to cover every
    line the producer can have in flight while earlier ones travel through
    the pipeline and any unbuffered stages in between.
    """
    n = g[nid]
    k = node_kernel(n)
    src, latency = _line_source(g, plans, n.inputs[p])
    in_flight = math.ceil(latency / plans[src].cycles_per_line)
    return max(base_depth(n), k.kh + k.sh + k.pt + in_flight + 1)


def _row_need(node, in_height: int, r: int) -> int:
    """Highest input row that output row ``r`` of ``node`` reads (-1: padding only)."""
    if node.kind in (OpKind.CONV2D, OpKind.DEPTHWISE, OpKind.MAXPOOL, OpKind.MATMUL):
        k = node_kernel(node)
        return min(in_height - 1, r * k.sh + k.kh - 1 - k.pt)
    if node.kind is OpKind.MEAN:
        return in_height - 1
    return r


def _dependency(g: Graph, src: str, targets: set[str]) -> dict[str, np.ndarray]:
    """For each node, the highest line of ``src`` needed to produce each output row."""
    F: dict[str, np.ndarray] = {src: np.arange(g[src].out_shape.h)}
    for nid in topo_order(g):
        if nid == src or nid not in targets:
            continue
        n = g[nid]
        rows = n.out_shape.h
        f = np.full(rows, -1, dtype=np.int64)
        for u in n.inputs:
            if u not in F:
                continue
            hu = g[u].out_shape.h
            need = np.array([_row_need(n, hu, r) for r in range(rows)])
            fu = np.where(need >= 0, F[u][np.clip(need, 0, hu - 1)], -1)
            f = np.maximum(f, fu)
        F[nid] = f
    return F


def _ancestors(g: Graph, nid: str) -> set[str]:
    seen, stack = set(), [nid]
    while stack:
        k = stack.pop()
        if k in seen:
            continue
        seen.add(k)
        stack.extend(g[k].inputs)
    return seen


def _descendants(g: Graph, nid: str) -> set[str]:
    cons = g.consumer_map()
    seen, stack = set(), [nid]
    while stack:
        k = stack.pop()
        if k in seen:
            continue
        seen.add(k)
        stack.extend(cons.get(k, ()))
    return seen


def _common_ancestor(g: Graph, add_id: str) -> str:
    """Nearest common ancestor of the two inputs of an Add."""
    a, b = g[add_id].inputs
    common = _ancestors(g, a) & _ancestors(g, b)
    if not common:
        raise PlanError(f"node {add_id}: Add inputs have no common ancestor")
    order = {k: i for i, k in enumerate(topo_order(g))}
    return max(common, key=lambda k: order[k])


def add_requirements(g: Graph, add_id: str) -> tuple[int, int]:
    """Minimum deadlock-free depth of each Add input buffer.

    The two inputs share a nearest common ancestor X. While the Add waits for
    row ``r`` on one side, X must be able to emit every line that side still
    needs, and the other side has to hold all rows it can compute from those
    lines (plus the one being reserved).
    """
    n = g[add_id]
    a, b = n.inputs
    x = _common_ancestor(g, add_id)
    F = _dependency(g, x, _ancestors(g, a) | _ancestors(g, b))
    fa, fb = F[a], F[b]

    def need(f_wait: np.ndarray, f_hold: np.ndarray) -> int:
        held = np.searchsorted(f_hold, f_wait, side="right") - np.arange(len(f_wait))
        return int(max(1, held.max()))

    return need(fb, fa), need(fa, fb)


def _path_lines(g: Graph, x: str, region: set[str], depths: dict[str, tuple[int, ...]]) -> dict[str, int]:
    """Most buffered lines on any path from ``x`` to each node of ``region``."""
    L = {x: 0}
    for nid in topo_order(g):
        if nid not in region or nid == x:
            continue
        n = g[nid]
        best = None
        for p, u in enumerate(n.inputs):
            if u not in L:
                continue
            own = depths[nid][p] if depths.get(nid) else 0
            best = max(best or 0, L[u] + own)
        if best is not None:
            L[nid] = best
    return L


def add_path_depths(g: Graph, add_id: str, depths: dict[str, tuple[int, ...]],
                    lo: tuple[int, int] = (0, 0)) -> tuple[int, int]:
    """Add input depths that match the buffering on both paths from the common ancestor.

    Each side gets the other side's surplus of buffered lines (at least the
    minimum depth, or ``lo``) plus one margin line.
    """
    n = g[add_id]
    a, b = n.inputs
    x = _common_ancestor(g, add_id)
    region = (_ancestors(g, a) | _ancestors(g, b)) & _descendants(g, x)
    L = _path_lines(g, x, region, depths)
    la, lb = L[a], L[b]
    lo_a, lo_b = (max(base_depth(n), v) for v in lo)
    return max(lo_a, lb - la) + 1, max(lo_b, la - lb) + 1


def assign_buffer_depths(g: Graph, plans: PlanSet) -> PlanSet:
    """Give every buffered stage at least ``k_h + 2`` lines and size Add inputs.

    An Add input gets the larger of the path-matching depth and the minimum
    depth that keeps the two branches from deadlocking.
    """
    g = infer_shapes(g)
    depths: dict[str, tuple[int, ...]] = {}
    required: dict[str, tuple[int, ...]] = {}
    for nid in topo_order(g):
        n = g[nid]
        if n.kind is OpKind.ADD:
            req = add_requirements(g, nid)
            match = add_path_depths(g, nid, depths, (port_depth(g, plans, nid, 0), port_depth(g, plans, nid, 1)))
            depths[nid] = tuple(max(m, r) for m, r in zip(match, req))
            required[nid] = req
        elif n.kind in BUFFERED_KINDS:
            depths[nid] = (port_depth(g, plans, nid, 0),)
            required[nid] = (node_kernel(n).kh,)
        else:
            depths[nid], required[nid] = (), ()
    out = {nid: replace(p, depths=depths[nid], required_depths=required[nid]) for nid, p in plans.plans.items()}
    return replace(plans, plans=out)


def compile_plan(g: Graph, dsp_target: int, **kw) -> PlanSet:
    return assign_buffer_depths(g, balance(g, dsp_target, **kw))


def splits_of(plans: PlanSet) -> dict[str, int]:
    return {k: p.S for k, p in plans.plans.items()}


def naive_vs_exact(g: Graph, dsp_target: int, **kw) -> tuple[int, int]:
    """Exact bottleneck cycles of plans balanced with the exact and the naive model."""
    exact = balance(g, dsp_target, model="exact", **kw)
    naive = balance(g, dsp_target, model="naive", **kw)
    return exact.bottleneck_cycles, naive.bottleneck_cycles

