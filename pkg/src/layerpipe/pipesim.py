"""Cycle-level simulation of the layer pipeline.

Every node is a stage that produces one output line per job. Stages with an
input buffer (convolutions, pooling, Add, Mean) hold whole lines in per-input
buffers of a fixed number of lines; BiasAdd/Relu/Relu6 only have a two-line
skid register and forward backpressure. A producer starts a line only after
reserving a slot in every buffer the line will eventually land in, which is
the coarse line-granular backpressure of the hardware.

Time advances in whole cycles. At each cycle, scheduled events (line
deliveries, retirements, engines becoming free) are applied first, then every
stage decides whether to start its next job. Decisions are visited consumers
first, so a register emptied this cycle can be refilled by its producer in the
same cycle. Nothing changes between events, so :meth:`Pipeline.run` jumps from
event to event while :meth:`Pipeline.step` advances exactly one cycle; both
give identical traces.

Convolutions are computed by gathering activations through the decoded
runlength addresses of each channel split's stream.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import CONV_KINDS, WINDOWED_KINDS, Graph, OpKind, infer_shapes, node_kernel, topo_order
from .interp import (
    fixed_add,
    fixed_bias_add,
    fixed_conv_output,
    fixed_mean,
    fixed_relu,
    quantize,
    quantized_bias,
    requantize,
)
from .planner import BUFFERED_KINDS, HARDWARE_KINDS, PIPE_CONST, UNBUFFERED_KINDS, PlanSet
from .sparsity import EncodedLayer, stream_addresses

DEFAULT_PIPE_CONST = PIPE_CONST
# lines an unbuffered stage can hold, so a producer's pipeline latency overlaps its next line
REGISTER_LINES = 2

WAITING = "waiting-input"
BACKPRESSURED = "backpressured"
COMPUTING = "computing"
IDLE = "idle"


class SimulationError(RuntimeError):
    pass


class SimulationTimeout(SimulationError):
    """The run hit ``max_cycles`` before finishing (not a deadlock)."""


class UnsupportedStage(SimulationError):
    pass


# ---------------------------------------------------------------------------
# stage building blocks


class _Port:
    """Input buffer of a buffered stage, addressed by (image, padded line)."""

    def __init__(self, capacity: int, pad_top: int, pad_bottom_needed: int, needed: int, pad_line):
        self.capacity = capacity
        self.pad_top = pad_top
        self.pad_bottom = pad_bottom_needed
        self.needed = needed  # padded lines read per image
        self.pad_line = pad_line
        self.lines: dict[tuple[int, int], np.ndarray] = {}
        self.reserved = 0
        self.received = 0
        self.discarded = 0
        self.retired: dict[int, int] = {}  # image -> lines below this bound are no longer read

    @property
    def occupancy(self) -> int:
        return len(self.lines)

    def free(self) -> int:
        return self.capacity - len(self.lines) - self.reserved

    def slots_for(self, h: int, height: int) -> int:
        """Slots needed when the producer starts real line ``h``."""
        n = 1 if h + self.pad_top < self.needed else 0
        if h == 0:
            n += self.pad_top
        if h == height - 1:
            n += self.pad_bottom
        return n

    def reserve(self, img: int, h: int, height: int) -> None:
        if h == 0:
            for q in range(self.pad_top):
                self.lines[(img, q)] = self.pad_line
        if h == height - 1:
            for q in range(self.pad_top + height, self.pad_top + height + self.pad_bottom):
                self.lines[(img, q)] = self.pad_line
        if h + self.pad_top < self.needed:
            self.reserved += 1

    def deliver(self, img: int, h: int, data: np.ndarray) -> None:
        self.received += 1
        q = h + self.pad_top
        if q >= self.needed:
            self.discarded += 1
        elif q < self.retired.get(img, 0):
            # skipped by a stride larger than the kernel: already past this line
            self.reserved -= 1
            self.discarded += 1
        else:
            self.lines[(img, q)] = data
            self.reserved -= 1

    def has(self, img: int, lo: int, hi: int) -> bool:
        return all((img, q) in self.lines for q in range(lo, hi))

    def retire(self, img: int, below: int) -> None:
        self.retired[img] = max(self.retired.get(img, 0), below)
        self.retired.pop(img - 2, None)
        for key in [k for k in self.lines if k[0] == img and k[1] < below]:
            del self.lines[key]


@dataclass
class StageStats:
    node_id: str
    kind: str
    planned_cycles_per_line: int
    planned_cycles_per_image: int
    busy: int = 0
    stall_input: int = 0
    stall_backpressure: int = 0
    idle: int = 0
    jobs: int = 0
    lines_out: int = 0
    cycles_per_line: Optional[float] = None
    cycles_per_image: Optional[float] = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


class _Stage:
    def __init__(self, node, plan, in_shapes, in_formats, layer: Optional[EncodedLayer], pipe_const: int):
        self.node = node
        self.id = node.id
        self.kind = node.kind
        self.plan = plan
        self.cpl = plan.cycles_per_line
        self.out_h = node.out_shape.h
        self.in_shapes = in_shapes
        self.in_formats = in_formats
        self.fmt = node.precision
        self.buffered = node.kind in BUFFERED_KINDS
        self.unbuffered = node.kind in UNBUFFERED_KINDS
        self.emit_delay = self.cpl
        self.retire_delay = self.cpl
        self.consumers: list[tuple["_Stage", int]] = []
        self.sinks: list[tuple["_Stage", int]] = []  # buffered ports reachable through unbuffered stages
        self.is_output = False
        self.ports: list[_Port] = []
        self.register: deque = deque()  # skid register of an unbuffered stage
        self.reg_reserved = 0
        self.free_at = 0
        self.busy_until = 0
        self.current: Optional[tuple[int, int, int]] = None  # (img, row, start)
        self.next_job = 0
        self.state = IDLE
        self.blocked = False
        self.lines_out = 0
        self.starts: list[tuple[int, int, int]] = []  # (img, row, cycle)
        self.stats = StageStats(node.id, node.kind.value, plan.cycles_per_line, plan.cycles_per_image)
        self.mean_acc: dict[int, np.ndarray] = {}
        self.layer = layer
        self.kspec = node_kernel(node) if node.kind in WINDOWED_KINDS else None
        if node.kind in CONV_KINDS:
            self._prepare_conv(layer, pipe_const)

    # -- convolution datapath ------------------------------------------------

    def _prepare_conv(self, layer: Optional[EncodedLayer], pipe_const: int) -> None:
        if layer is None:
            raise SimulationError(f"node {self.id}: missing weight streams")
        if layer.S != self.plan.S:
            raise SimulationError(f"node {self.id}: streams have {layer.S} splits, plan says {self.plan.S}")
        if int(layer.counts.sum()) + self.plan.overhead != self.cpl:
            raise SimulationError(f"node {self.id}: stream counts disagree with the planned cycles per line")
        k = self.kspec
        S = layer.S
        self.emit_delay = self.cpl + math.ceil(S / 2) + pipe_const
        self.retire_delay = self.cpl + (S - 1) // 2
        parts = [stream_addresses(layer, s) for s in range(S)]
        g, y, z, x, w = (np.concatenate(a) for a in zip(*parts))
        out_ch = z if layer.depthwise else g
        keep = w != 0
        order = np.argsort(out_ch[keep], kind="stable")
        self.g_out = out_ch[keep][order]
        self.g_y, self.g_z, self.g_x, self.g_w = (a[keep][order] for a in (y, z, x, w))
        ow = self.node.out_shape.w
        self.g_cols = self.g_x[:, None] + k.sw * np.arange(ow)[None, :]
        if len(self.g_out):
            bounds = np.flatnonzero(np.r_[True, self.g_out[1:] != self.g_out[:-1]])
            self.g_starts = bounds
            self.g_chan = self.g_out[bounds]
        else:
            self.g_starts = np.zeros(0, np.int64)
            self.g_chan = np.zeros(0, np.int64)
        self.cum_counts = np.cumsum(layer.counts)

    def conv_line(self, window: np.ndarray) -> np.ndarray:
        k = self.kspec
        win = np.pad(window, ((0, 0), (k.pl, k.pr), (0, 0)))
        c_out = self.node.out_shape.c
        acc = np.zeros((c_out, self.node.out_shape.w), np.int64)
        if len(self.g_w):
            vals = win[self.g_y[:, None], self.g_cols, self.g_z[:, None]]
            prod = vals * self.g_w[:, None]
            acc[self.g_chan] = np.add.reduceat(prod, self.g_starts, axis=0)
        return fixed_conv_output(acc.T, self.in_formats[0], self.node.wformat, self.fmt)

    def down_counter(self, t: int) -> Optional[tuple[int, int]]:
        """(output channel, remaining entries) of a running convolution line at cycle ``t``."""
        if self.current is None or self.kind not in CONV_KINDS:
            return None
        e = t - self.current[2] - self.plan.overhead
        if e < 0 or e >= self.cum_counts[-1]:
            return None
        oc = int(np.searchsorted(self.cum_counts, e, side="right"))
        return oc, int(self.cum_counts[oc] - e)

    # -- generic job logic ---------------------------------------------------

    @property
    def total_jobs_per_image(self) -> int:
        if self.kind is OpKind.MEAN:
            return self.in_shapes[0].h
        return self.out_h


# ---------------------------------------------------------------------------


@dataclass
class SimReport:
    cycles: int
    stages: dict[str, StageStats]
    first_output_latency: Optional[int]
    completion: list[int]
    initiation_interval: Optional[float]
    outputs: list[dict[str, np.ndarray]]
    deadlock: bool = False
    deadlock_snapshot: Optional[dict] = None
    conservation: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def max_stage_cycles_per_image(self) -> int:
        return max(s.planned_cycles_per_image for s in self.stages.values())

    def to_json(self) -> dict:
        return {
            "cycles": self.cycles,
            "first_output_latency": self.first_output_latency,
            "completion": self.completion,
            "initiation_interval": self.initiation_interval,
            "max_stage_cycles_per_image": self.max_stage_cycles_per_image,
            "deadlock": self.deadlock,
            "deadlock_snapshot": self.deadlock_snapshot,
            "conservation": {k: list(v) for k, v in sorted(self.conservation.items())},
            "stages": {k: self.stages[k].to_json() for k in sorted(self.stages)},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


class Pipeline:
    """A built pipeline; feed images with :meth:`load` and advance with :meth:`step` or :meth:`run`."""

    def __init__(self, g: Graph, plans: PlanSet, layers: dict[str, EncodedLayer],
                 pipe_const: int = DEFAULT_PIPE_CONST, deadlock_factor: int = 10):
        g = infer_shapes(g)
        self.g = g
        self.plans = plans
        self.order = topo_order(g)
        self.stages: dict[str, _Stage] = {}
        for nid in self.order:
            n = g[nid]
            if n.kind not in HARDWARE_KINDS:
                raise UnsupportedStage(f"node {nid}: {n.kind.value} cannot be mapped to a pipeline stage")
            if nid not in plans.plans:
                raise SimulationError(f"node {nid}: no plan")
            in_shapes = [g[i].out_shape for i in n.inputs]
            in_formats = [g[i].precision for i in n.inputs]
            self.stages[nid] = _Stage(n, plans[nid], in_shapes, in_formats, layers.get(nid), pipe_const)
        for nid in self.order:
            st = self.stages[nid]
            n = g[nid]
            if st.buffered:
                depths = plans[nid].depths
                if len(depths) != len(n.inputs):
                    raise SimulationError(f"node {nid}: plan has {len(depths)} buffer depths for {len(n.inputs)} inputs")
                for p, (src, cap) in enumerate(zip(n.inputs, depths)):
                    st.ports.append(self._make_port(n, p, cap))
            for p, src in enumerate(n.inputs):
                self.stages[src].consumers.append((st, p))
        for o in g.outputs:
            self.stages[o].is_output = True
        for st in self.stages.values():
            st.sinks = self._reachable_sinks(st)
        self.window = deadlock_factor * max(p.cycles_per_line for p in plans.plans.values())
        self.t = 0
        self.events: list = []
        self.seq = 0
        self.images: list[np.ndarray] = []
        self.outputs: list[dict[str, list]] = []
        self.first_output: Optional[int] = None
        self.completion: dict[int, int] = {}
        self.last_progress = 0
        self.trace_rows: Optional[list] = None
        self._last_trace: dict[str, tuple] = {}
        self.edge_out: dict[tuple[str, str, int], int] = {}

    # -- construction helpers ------------------------------------------------

    def _make_port(self, n, p: int, capacity: int) -> _Port:
        src_shape = self.g[n.inputs[p]].out_shape
        src_fmt = self.g[n.inputs[p]].precision
        if n.kind in WINDOWED_KINDS:
            k = node_kernel(n)
            needed = (n.out_shape.h - 1) * k.sh + k.kh
            pad_bottom = max(0, needed - k.pt - src_shape.h)
            pad_value = src_fmt.min_int if n.kind is OpKind.MAXPOOL else 0
            pad_line = np.full((src_shape.w, src_shape.c), pad_value, np.int64)
            pad_line.setflags(write=False)
            return _Port(capacity, k.pt, pad_bottom, needed, pad_line)
        return _Port(capacity, 0, 0, src_shape.h, None)

    def _reachable_sinks(self, st: _Stage) -> list[tuple[_Stage, int]]:
        out = []
        for c, p in st.consumers:
            if c.buffered:
                out.append((c, p))
            else:
                out.extend(self._reachable_sinks(c))
        return out

    # -- inputs --------------------------------------------------------------

    def load(self, images: list[np.ndarray]) -> None:
        ph = self.g.placeholder
        for img in images:
            img = np.asarray(img, dtype=np.float64)
            if img.shape != ph.out_shape.as_tuple():
                raise SimulationError(f"input shape {img.shape} does not match placeholder {ph.out_shape.as_tuple()}")
            self.images.append(quantize(img, ph.precision))
            self.outputs.append({o: [None] * self.g[o].out_shape.h for o in self.g.outputs})

    def block(self, node_id: str) -> None:
        """Freeze a stage so it never starts another job (backpressure experiments)."""
        self.stages[node_id].blocked = True

    # -- event machinery -----------------------------------------------------

    def _schedule(self, t: int, kind: str, payload) -> None:
        heapq.heappush(self.events, (t, self.seq, kind, payload))
        self.seq += 1

    def _commit(self, t: int) -> None:
        while self.events and self.events[0][0] == t:
            _, _, kind, payload = heapq.heappop(self.events)
            if kind == "emit":
                self._deliver(*payload)
            elif kind == "retire":
                st, img, row = payload
                self._retire(st, img, row)
            elif kind == "free":
                st = payload
                st.current = None
            self.last_progress = t

    def _deliver(self, st: _Stage, img: int, row: int, data: np.ndarray) -> None:
        st.lines_out += 1
        st.stats.lines_out += 1
        for c, p in st.consumers:
            key = (st.id, c.id, p)
            self.edge_out[key] = self.edge_out.get(key, 0) + 1
            if c.buffered:
                c.ports[p].deliver(img, row, data)
            else:
                c.register.append((img, row, data))
                c.reg_reserved -= 1
        if st.is_output:
            self.outputs[img][st.id][row] = data
            if self.first_output is None:
                self.first_output = self.t
            if all(all(v is not None for v in rows) for rows in self.outputs[img].values()):
                self.completion[img] = self.t

    def _retire(self, st: _Stage, img: int, row: int) -> None:
        if st.kind in WINDOWED_KINDS:
            port = st.ports[0]
            if row == st.out_h - 1:
                port.retire(img, port.needed)
            else:
                port.retire(img, (row + 1) * st.kspec.sh)
        else:
            for port in st.ports:
                port.retire(img, row + 1)

    # -- decisions -----------------------------------------------------------

    def _job(self, st: _Stage) -> Optional[tuple[int, int]]:
        if st.unbuffered:
            return st.register[0][:2] if st.register else None
        per = st.total_jobs_per_image
        img, row = divmod(st.next_job, per)
        if img >= len(self.images):
            return None
        return img, row

    def _inputs_ready(self, st: _Stage, img: int, row: int) -> bool:
        k = st.kind
        if k is OpKind.PLACEHOLDER:
            return True
        if st.unbuffered:
            return bool(st.register)
        if k in WINDOWED_KINDS:
            kk = st.kspec
            return st.ports[0].has(img, row * kk.sh, row * kk.sh + kk.kh)
        return all((img, row) in port.lines for port in st.ports)

    def _emits(self, st: _Stage, row: int) -> bool:
        return st.kind is not OpKind.MEAN or row == st.total_jobs_per_image - 1

    def _outputs_ready(self, st: _Stage, img: int, row: int) -> bool:
        if not self._emits(st, row):
            return True
        out_row = 0 if st.kind is OpKind.MEAN else row
        for c, _ in st.consumers:
            if c.unbuffered and len(c.register) + c.reg_reserved >= REGISTER_LINES:
                return False
        if st.unbuffered:
            return True
        for c, p in st.sinks:
            if c.ports[p].free() < c.ports[p].slots_for(out_row, st.out_h):
                return False
        return True

    def _compute(self, st: _Stage, img: int, row: int) -> Optional[np.ndarray]:
        k = st.kind
        n = st.node
        if k is OpKind.PLACEHOLDER:
            return self.images[img][row]
        if st.unbuffered:
            x = st.register[0][2]
            fin = st.in_formats[0]
            if k is OpKind.BIAS_ADD:
                return fixed_bias_add(x, fin, quantized_bias(n), n.wformat, st.fmt)
            return fixed_relu(x, fin, st.fmt, n.clip if k is OpKind.RELU6 else None)
        if k in WINDOWED_KINDS:
            kk = st.kspec
            port = st.ports[0]
            window = np.stack([port.lines[(img, row * kk.sh + j)] for j in range(kk.kh)])
            if k is OpKind.MAXPOOL:
                fin = st.in_formats[0]
                win = np.pad(window, ((0, 0), (kk.pl, kk.pr), (0, 0)), constant_values=fin.min_int)
                ow = n.out_shape.w
                out = None
                for kx in range(kk.kw):
                    cols = win[:, kx:kx + kk.sw * (ow - 1) + 1:kk.sw, :].max(axis=0)
                    out = cols if out is None else np.maximum(out, cols)
                return requantize(out, fin.frac, st.fmt)
            return st.conv_line(window)
        if k is OpKind.ADD:
            a = st.ports[0].lines[(img, row)]
            b = st.ports[1].lines[(img, row)]
            return fixed_add(a, st.in_formats[0], b, st.in_formats[1], st.fmt)
        if k is OpKind.MEAN:
            line = st.ports[0].lines[(img, row)]
            st.mean_acc[img] = st.mean_acc.get(img, 0) + line.sum(axis=0)
            if row == st.total_jobs_per_image - 1:
                shp = st.in_shapes[0]
                total = st.mean_acc.pop(img)
                return fixed_mean(total, shp.h * shp.w, st.in_formats[0], st.fmt)[None, :]
            return None
        raise UnsupportedStage(f"node {st.id}: {k.value}")

    def _start(self, st: _Stage, img: int, row: int, t: int) -> None:
        data = self._compute(st, img, row)
        emits = data is not None
        out_row = 0 if st.kind is OpKind.MEAN else row
        if emits:
            for c, _ in st.consumers:
                if c.unbuffered:
                    c.reg_reserved += 1
            if not st.unbuffered:
                for c, p in st.sinks:
                    c.ports[p].reserve(img, out_row, st.out_h)
        if st.unbuffered:
            st.register.popleft()
        else:
            st.next_job += 1
        st.current = (img, row, t)
        st.free_at = t + st.cpl
        st.stats.jobs += 1
        st.stats.busy += st.cpl
        st.starts.append((img, row, t))
        self._schedule(t + st.cpl, "free", st)
        if emits:
            self._schedule(t + st.emit_delay, "emit", (st, img, out_row, data))
        if st.buffered:
            self._schedule(t + st.retire_delay, "retire", (st, img, row))
        self.last_progress = t

    def _decide(self, t: int) -> None:
        for nid in reversed(self.order):
            st = self.stages[nid]
            if st.free_at > t:
                st.state = COMPUTING
                continue
            job = self._job(st)
            if job is None or st.blocked:
                st.state = IDLE if job is None else BACKPRESSURED
                continue
            img, row = job
            if not self._inputs_ready(st, img, row):
                st.state = WAITING
            elif not self._outputs_ready(st, img, row):
                st.state = BACKPRESSURED
            else:
                self._start(st, img, row, t)
                st.state = COMPUTING

    def _account(self, t_from: int, t_to: int) -> None:
        dt = t_to - t_from
        if dt <= 0:
            return
        for st in self.stages.values():
            if st.state == WAITING:
                st.stats.stall_input += dt
            elif st.state == BACKPRESSURED:
                st.stats.stall_backpressure += dt
            elif st.state == IDLE:
                st.stats.idle += dt

    def _trace(self, t: int) -> None:
        if self.trace_rows is None:
            return
        for nid in self.order:
            st = self.stages[nid]
            occ = "|".join(str(p.occupancy) for p in st.ports) if st.ports else str(len(st.register))
            rec = (st.state, occ, st.lines_out)
            if self._last_trace.get(nid) != rec:
                self._last_trace[nid] = rec
                self.trace_rows.append((t, nid, *rec))

    def enable_trace(self) -> None:
        self.trace_rows = []

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["cycle", "stage", "state", "occupancy", "lines_produced"])
            w.writerows(self.trace_rows or [])

    # -- driving -------------------------------------------------------------

    def done(self) -> bool:
        return len(self.completion) == len(self.images)

    def step(self) -> None:
        """Advance exactly one cycle."""
        if self.t > 0 or self.seq > 0:
            self.t += 1
        self._commit(self.t)
        self._decide(self.t)
        self._trace(self.t)
        self._account(self.t, self.t + 1)

    def run(self, max_cycles: int = 50_000_000) -> SimReport:
        """Simulate until every loaded image has left the pipeline or a deadlock is found."""
        if not self.images:
            raise SimulationError("no images loaded")
        deadlock = False
        if self.seq == 0:
            self._commit(self.t)
            self._decide(self.t)
            self._trace(self.t)
        while not self.done():
            if not self.events:
                deadlock = True
                end = self.last_progress + self.window
                self._account(self.t, end)
                self.t = end
                break
            t_next = self.events[0][0]
            if t_next > max_cycles:
                raise SimulationTimeout(f"exceeded max_cycles={max_cycles} at cycle {self.t}")
            self._account(self.t, t_next)
            self.t = t_next
            self._commit(self.t)
            self._decide(self.t)
            self._trace(self.t)
        return self.report(deadlock)

    # -- reporting -----------------------------------------------------------

    def snapshot(self) -> dict:
        snap = {}
        for nid in self.order:
            st = self.stages[nid]
            job = self._job(st)
            d = {"state": st.state, "next_job": list(job) if job else None, "lines_out": st.lines_out}
            if st.ports:
                d["ports"] = [{"capacity": p.capacity, "occupancy": p.occupancy, "reserved": p.reserved}
                              for p in st.ports]
            if st.unbuffered:
                d["register_lines"] = len(st.register)
            dc = st.down_counter(self.t)
            if dc is not None:
                d["output_channel"], d["down_counter"] = dc
            snap[nid] = d
        return snap

    def report(self, deadlock: bool = False) -> SimReport:
        n_img = len(self.images)
        lo = n_img // 2
        for st in self.stages.values():
            per = st.total_jobs_per_image
            firsts = {}
            steady = []
            for img, row, t in st.starts:
                firsts.setdefault(img, t)
                if img >= lo:
                    steady.append(t)
            if len(steady) >= 2:
                st.stats.cycles_per_line = (steady[-1] - steady[0]) / (len(steady) - 1)
            imgs = [firsts[i] for i in range(lo, n_img) if i in firsts]
            if len(imgs) >= 2:
                st.stats.cycles_per_image = (imgs[-1] - imgs[0]) / (len(imgs) - 1)
            elif st.stats.cycles_per_line is not None:
                st.stats.cycles_per_image = st.stats.cycles_per_line * per
        done = [self.completion[i] for i in range(n_img) if i in self.completion]
        ii = None
        tail = [self.completion[i] for i in range(lo, n_img) if i in self.completion]
        if len(tail) >= 2:
            ii = (tail[-1] - tail[0]) / (len(tail) - 1)
        outs = []
        for i in range(n_img):
            if i in self.completion:
                outs.append({o: np.stack(rows) for o, rows in self.outputs[i].items()})
        cons = {}
        for (src, dst, p), produced in sorted(self.edge_out.items()):
            port_in = self.stages[dst].ports[p].received if self.stages[dst].buffered else None
            cons[f"{src}->{dst}:{p}"] = (produced, produced if port_in is None else port_in)
        return SimReport(self.t, {k: self.stages[k].stats for k in self.order}, self.first_output, done, ii, outs,
                         deadlock, self.snapshot() if deadlock else None, cons)


def build_pipeline(g: Graph, plans: PlanSet, layers: dict[str, EncodedLayer], **kw) -> Pipeline:
    return Pipeline(g, plans, layers, **kw)


def simulate(g: Graph, plans: PlanSet, layers: dict[str, EncodedLayer], images: list[np.ndarray],
             max_cycles: int = 50_000_000, trace=None, **kw) -> SimReport:
    """Build, feed ``images`` back to back and run to completion."""
    p = Pipeline(g, plans, layers, **kw)
    if trace is not None:
        p.enable_trace()
    p.load(images)
    rep = p.run(max_cycles)
    if trace is not None:
        p.write_trace(trace)
    return rep
