"""Graph rewrites that eliminate BatchNorm and Pad nodes.

BatchNorm is split into a per-channel multiply (ScaleConst) and add
(ShiftConst); those are moved past ReLU, MaxPool and Pad where that is exact,
then folded into neighbouring convolutions and biases. Pads are merged into
the padding fields of their consumer. Each pass runs to its own fixpoint, so
running a pass twice is the same as running it once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .graph import (
    CONV_KINDS,
    Graph,
    GraphError,
    KernelSpec,
    Node,
    OpKind,
    infer_shapes,
    node_kernel,
    normalize_matmul,
    save_graph,
)
from .interp import bn_affine


class TransformError(GraphError):
    pass


@dataclass
class PassReport:
    name: str
    removed: list[str] = field(default_factory=list)
    added: list[str] = field(default_factory=list)
    rewritten: list[str] = field(default_factory=list)
    applied: int = 0
    blocked: list[tuple[str, str]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.removed or self.added or self.rewritten or self.applied or self.blocked)

    def block(self, node_id: str, reason: str) -> None:
        if (node_id, reason) not in self.blocked:
            self.blocked.append((node_id, reason))

    def summary(self) -> str:
        lines = [f"pass {self.name}: applied={self.applied} removed={len(self.removed)} "
                 f"added={len(self.added)} rewritten={len(self.rewritten)} blocked={len(self.blocked)}"]
        lines += [f"  removed {n}" for n in self.removed]
        lines += [f"  added {n}" for n in self.added]
        lines += [f"  rewritten {n}" for n in self.rewritten]
        lines += [f"  blocked {n}: {why}" for n, why in self.blocked]
        return "\n".join(lines)


class _Editable:
    """Mutable working copy of a graph used inside a single pass."""

    def __init__(self, g: Graph):
        self.order = list(g.nodes)
        self.nodes = dict(g.nodes)
        self.outputs = list(g.outputs)

    def graph(self) -> Graph:
        return infer_shapes(Graph({k: self.nodes[k] for k in self.order}, tuple(self.outputs)))

    def consumers(self, nid: str) -> list[str]:
        return [k for k in self.order if nid in self.nodes[k].inputs]

    def only_consumer(self, nid: str) -> Optional[Node]:
        cons = self.consumers(nid)
        if len(cons) != 1 or nid in self.outputs:
            return None
        return self.nodes[cons[0]]

    def rewire(self, old: str, new: str, skip: tuple[str, ...] = ()) -> None:
        for k in self.order:
            n = self.nodes[k]
            if k not in skip and old in n.inputs:
                self.nodes[k] = n.replace(inputs=tuple(new if i == old else i for i in n.inputs))
        self.outputs = [new if o == old else o for o in self.outputs]

    def remove(self, nid: str) -> None:
        """Drop a single-input node, connecting its consumers to its input."""
        (src,) = self.nodes[nid].inputs
        self.rewire(nid, src)
        self.order.remove(nid)
        del self.nodes[nid]

    def insert_after(self, anchor: str, node: Node) -> None:
        self.nodes[node.id] = node
        self.order.insert(self.order.index(anchor) + 1, node.id)

    def swap(self, a: str, b: str) -> None:
        """Turn ``in -> a -> b -> ...`` into ``in -> b -> a -> ...``."""
        na, nb = self.nodes[a], self.nodes[b]
        self.rewire(b, a, skip=(a,))
        self.nodes[b] = nb.replace(inputs=na.inputs)
        self.nodes[a] = self.nodes[a].replace(inputs=(b,))
        ia, ib = self.order.index(a), self.order.index(b)
        self.order[ia], self.order[ib] = b, a

    def fresh_id(self, base: str) -> str:
        nid, k = base, 1
        while nid in self.nodes:
            nid = f"{base}_{k}"
            k += 1
        return nid


def _fixpoint(step: Callable[[_Editable, PassReport], bool], g: Graph, name: str,
              report: Optional[PassReport]) -> Graph:
    rep = report if report is not None else PassReport(name)
    ed = _Editable(infer_shapes(g))
    while step(ed, rep):
        pass
    return ed.graph()


# ---------------------------------------------------------------------------
# BatchNorm decomposition


def decompose_batchnorm(g: Graph, report: Optional[PassReport] = None) -> Graph:
    """Replace each BatchNorm by ScaleConst(gamma/sqrt(var+eps)) -> ShiftConst(beta - mean*scale)."""
    rep = report if report is not None else PassReport("decompose_batchnorm")
    ed = _Editable(infer_shapes(g))
    for nid in [k for k in ed.order if ed.nodes[k].kind is OpKind.BATCHNORM]:
        bn = ed.nodes[nid]
        denom = bn.bn.var.astype(np.float64) + bn.bn.eps
        if np.any(denom <= 0):
            raise TransformError(f"node {nid}: variance + epsilon must be positive")
        s, t = bn_affine(bn)
        scale_id, shift_id = ed.fresh_id(f"{nid}/scale"), ed.fresh_id(f"{nid}/shift")
        scale = Node(scale_id, OpKind.SCALE, bn.inputs, scale=s, precision=bn.precision)
        shift = Node(shift_id, OpKind.SHIFT, (scale_id,), shift=t, precision=bn.precision)
        ed.rewire(nid, shift_id)
        idx = ed.order.index(nid)
        ed.order[idx:idx + 1] = [scale_id, shift_id]
        del ed.nodes[nid]
        ed.nodes[scale_id], ed.nodes[shift_id] = scale, shift
        rep.removed.append(nid)
        rep.added += [scale_id, shift_id]
        rep.applied += 1
    return ed.graph()


# ---------------------------------------------------------------------------
# swaps


def _swap_relu_step(ed: _Editable, rep: PassReport) -> bool:
    for nid in list(ed.order):
        n = ed.nodes[nid]
        if n.kind is not OpKind.SCALE:
            continue
        r = ed.only_consumer(nid)
        if r is None or r.kind not in (OpKind.RELU, OpKind.RELU6):
            if r is None and any(ed.nodes[c].kind in (OpKind.RELU, OpKind.RELU6) for c in ed.consumers(nid)):
                rep.block(nid, "scale feeds a ReLU but has other consumers")
            continue
        s = n.scale.astype(np.float64)
        if np.any(s < 0):
            rep.block(nid, "negative scale does not commute with ReLU")
            continue
        if r.kind is OpKind.RELU6:
            if not np.all(s == s[0]) or s[0] <= 0:
                rep.block(nid, "Relu6 swap needs a uniform positive scale")
                continue
            ed.nodes[r.id] = r.replace(clip=float(r.clip / s[0]))
        ed.swap(nid, r.id)
        rep.rewritten += [nid, r.id]
        rep.applied += 1
        return True
    return False


def swap_scale_past_relu(g: Graph, report: Optional[PassReport] = None) -> Graph:
    """Move ScaleConst after Relu (non-negative scale) or Relu6 (uniform positive scale, clip rescaled)."""
    return _fixpoint(_swap_relu_step, g, "swap_scale_past_relu", report)


def _swap_maxpool_step(ed: _Editable, rep: PassReport) -> bool:
    for nid in list(ed.order):
        n = ed.nodes[nid]
        if n.kind not in (OpKind.SCALE, OpKind.SHIFT):
            continue
        m = ed.only_consumer(nid)
        if m is None or m.kind is not OpKind.MAXPOOL:
            continue
        if n.kind is OpKind.SCALE and np.any(n.scale < 0):
            rep.block(nid, "negative scale does not commute with max")
            continue
        ed.swap(nid, m.id)
        rep.rewritten += [nid, m.id]
        rep.applied += 1
        return True
    return False


def swap_affine_past_maxpool(g: Graph, report: Optional[PassReport] = None) -> Graph:
    """Move ScaleConst (non-negative) and ShiftConst after MaxPool."""
    return _fixpoint(_swap_maxpool_step, g, "swap_affine_past_maxpool", report)


def _swap_pad_step(ed: _Editable, rep: PassReport) -> bool:
    for nid in list(ed.order):
        n = ed.nodes[nid]
        if n.kind not in (OpKind.SCALE, OpKind.SHIFT):
            continue
        p = ed.only_consumer(nid)
        if p is None or p.kind is not OpKind.PAD:
            continue
        if n.kind is OpKind.SHIFT:
            rep.block(nid, "shift does not preserve zero padding")
            continue
        ed.swap(nid, p.id)
        rep.rewritten += [nid, p.id]
        rep.applied += 1
        return True
    return False


def swap_scale_past_pad(g: Graph, report: Optional[PassReport] = None) -> Graph:
    """Move ScaleConst after zero Pad; ShiftConst is never moved."""
    return _fixpoint(_swap_pad_step, g, "swap_scale_past_pad", report)


# ---------------------------------------------------------------------------
# folding


def _scale_out_channels(n: Node, s: np.ndarray) -> Node:
    w = n.weights.astype(np.float64)
    if n.kind is OpKind.DEPTHWISE:
        w = w * s[None, None, :, None]
    else:
        w = w * s[None, None, None, :]
    return n.replace(weights=w)


def _scale_in_channels(n: Node, s: np.ndarray) -> Node:
    return n.replace(weights=n.weights.astype(np.float64) * s[None, None, :, None])


def _shift_through(n: Node, t: np.ndarray) -> np.ndarray:
    """Per-output-channel constant produced by convolving a constant input ``t``."""
    w = n.weights.astype(np.float64)
    if n.kind is OpKind.DEPTHWISE:
        return t * w[:, :, :, 0].sum(axis=(0, 1))
    return np.einsum("yxio,i->o", w, t)


def _add_bias_after(ed: _Editable, conv: Node, delta: np.ndarray, rep: PassReport) -> None:
    cons = ed.consumers(conv.id)
    if len(cons) == 1 and conv.id not in ed.outputs and ed.nodes[cons[0]].kind is OpKind.BIAS_ADD:
        b = ed.nodes[cons[0]]
        ed.nodes[b.id] = b.replace(bias=b.bias.astype(np.float64) + delta)
        rep.rewritten.append(b.id)
        return
    bid = ed.fresh_id(f"{conv.id}/bias")
    ed.rewire(conv.id, bid)
    ed.insert_after(conv.id, Node(bid, OpKind.BIAS_ADD, (conv.id,), bias=delta, precision=conv.precision))
    rep.added.append(bid)


def _fold_step(ed: _Editable, rep: PassReport) -> bool:
    for nid in list(ed.order):
        n = ed.nodes[nid]
        if n.kind not in (OpKind.SCALE, OpKind.SHIFT):
            continue
        (src_id,) = n.inputs
        src = ed.nodes[src_id]
        only = ed.only_consumer(src_id)
        src_exclusive = only is not None and only.id == nid

        # adjacent pairs compose into canonical scale-then-shift form
        nxt = ed.only_consumer(nid)
        if nxt is not None and nxt.kind in (OpKind.SCALE, OpKind.SHIFT):
            if n.kind is OpKind.SCALE and nxt.kind is OpKind.SCALE:
                ed.nodes[nxt.id] = nxt.replace(scale=n.scale.astype(np.float64) * nxt.scale)
            elif n.kind is OpKind.SHIFT and nxt.kind is OpKind.SHIFT:
                ed.nodes[nxt.id] = nxt.replace(shift=n.shift.astype(np.float64) + nxt.shift)
            elif n.kind is OpKind.SHIFT and nxt.kind is OpKind.SCALE:
                # (x + t) * s == x * s + t * s
                moved = n.shift.astype(np.float64) * nxt.scale
                ed.swap(nid, nxt.id)
                ed.nodes[nid] = ed.nodes[nid].replace(shift=moved)
                rep.rewritten += [nid, nxt.id]
                rep.applied += 1
                return True
            else:
                nxt = None
            if nxt is not None:
                ed.remove(nid)
                rep.removed.append(nid)
                rep.rewritten.append(nxt.id)
                rep.applied += 1
                return True

        # fold into the producer
        if n.kind is OpKind.SCALE and src_exclusive and src.kind in CONV_KINDS:
            ed.nodes[src_id] = _scale_out_channels(src, n.scale.astype(np.float64))
            ed.remove(nid)
            rep.removed.append(nid)
            rep.rewritten.append(src_id)
            rep.applied += 1
            return True
        if n.kind is OpKind.SCALE and src_exclusive and src.kind is OpKind.BIAS_ADD:
            (conv_id,) = src.inputs
            conv = ed.nodes[conv_id]
            conv_only = ed.only_consumer(conv_id)
            if conv.kind in CONV_KINDS and conv_only is not None and conv_only.id == src_id:
                s = n.scale.astype(np.float64)
                ed.nodes[conv_id] = _scale_out_channels(conv, s)
                ed.nodes[src_id] = src.replace(bias=src.bias.astype(np.float64) * s)
                ed.remove(nid)
                rep.removed.append(nid)
                rep.rewritten += [conv_id, src_id]
                rep.applied += 1
                return True
        if n.kind is OpKind.SHIFT and src_exclusive and src.kind is OpKind.BIAS_ADD:
            ed.nodes[src_id] = src.replace(bias=src.bias.astype(np.float64) + n.shift)
            ed.remove(nid)
            rep.removed.append(nid)
            rep.rewritten.append(src_id)
            rep.applied += 1
            return True
        if n.kind is OpKind.SHIFT and src_exclusive and src.kind in CONV_KINDS:
            ed.nodes[nid] = n.replace(kind=OpKind.BIAS_ADD, bias=n.shift, shift=None)
            rep.rewritten.append(nid)
            rep.applied += 1
            return True

        # fold into every consumer
        cons = [ed.nodes[c] for c in ed.consumers(nid)]
        if not cons or nid in ed.outputs or any(c.kind not in CONV_KINDS for c in cons):
            rep.block(nid, "no adjacent convolution to fold into")
            continue
        if n.kind is OpKind.SCALE:
            for c in cons:
                ed.nodes[c.id] = _scale_in_channels(c, n.scale.astype(np.float64))
            ed.remove(nid)
        else:
            if any(not node_kernel(c).unpadded for c in cons):
                rep.block(nid, "input-side shift cannot fold into a padded convolution")
                continue
            for c in cons:
                delta = _shift_through(c, n.shift.astype(np.float64))
                _add_bias_after(ed, ed.nodes[c.id], delta, rep)
            ed.remove(nid)
        rep.removed.append(nid)
        rep.rewritten += [c.id for c in cons]
        rep.applied += 1
        return True
    return False


def fold_affine(g: Graph, report: Optional[PassReport] = None) -> Graph:
    """Fold ScaleConst/ShiftConst nodes into adjacent convolutions and biases."""
    rep = report if report is not None else PassReport("fold_affine")
    out = _fixpoint(_fold_step, g, "fold_affine", rep)
    remaining = {n.id for n in out if n.kind in (OpKind.SCALE, OpKind.SHIFT)}
    rep.blocked = [(k, why) for k, why in rep.blocked if k in remaining]
    return out


# ---------------------------------------------------------------------------
# pad merging


def _maxpool_merge_exact(ed: _Editable, pad: Node, pool: Node) -> Optional[str]:
    src = ed.nodes[pad.inputs[0]]
    if src.kind not in (OpKind.RELU, OpKind.RELU6):
        return "max-pool pad merge needs a non-negative (ReLU) input"
    t, b, l, r = pad.pad
    k = pool.kernel
    merged = KernelSpec(k.kh, k.kw, k.sh, k.sw, k.pt + t, k.pb + b, k.pl + l, k.pr + r)
    h, w = src.out_shape.h, src.out_shape.w
    oh, ow = merged.out_hw(h, w)
    # every window must still cover at least one real activation
    if merged.pt >= merged.kh or merged.pl >= merged.kw:
        return "padding wider than the pooling window"
    if (oh - 1) * merged.sh >= merged.pt + h or (ow - 1) * merged.sw >= merged.pl + w:
        return "padding wider than the pooling window"
    return None


def _merge_pad_step(ed: _Editable, rep: PassReport) -> bool:
    for nid in list(ed.order):
        p = ed.nodes[nid]
        if p.kind is not OpKind.PAD:
            continue
        c = ed.only_consumer(nid)
        if c is None:
            rep.block(nid, "pad has several consumers")
            continue
        if c.kind not in (OpKind.CONV2D, OpKind.DEPTHWISE, OpKind.MAXPOOL):
            rep.block(nid, f"cannot merge pad into {c.kind.value}")
            continue
        if c.kind is OpKind.MAXPOOL:
            why = _maxpool_merge_exact(ed, p, c)
            if why:
                rep.block(nid, why)
                continue
        k = node_kernel(c)
        t, b, l, r = p.pad
        ed.nodes[c.id] = c.replace(kernel=KernelSpec(k.kh, k.kw, k.sh, k.sw, k.pt + t, k.pb + b, k.pl + l, k.pr + r))
        ed.remove(nid)
        rep.removed.append(nid)
        rep.rewritten.append(c.id)
        rep.applied += 1
        return True
    return False


def merge_pad(g: Graph, report: Optional[PassReport] = None) -> Graph:
    """Absorb Pad nodes into the padding of their Conv2D/DepthwiseConv2D/MaxPool consumer."""
    return _fixpoint(_merge_pad_step, g, "merge_pad", report)


# ---------------------------------------------------------------------------


def _normalize_matmul_pass(g: Graph, report: PassReport) -> Graph:
    ids = [n.id for n in g if n.kind is OpKind.MATMUL]
    out = normalize_matmul(g)
    report.rewritten += ids
    report.applied += len(ids)
    return out


PASSES = (
    ("decompose_batchnorm", decompose_batchnorm),
    ("swap_scale_past_relu", swap_scale_past_relu),
    ("swap_affine_past_maxpool", swap_affine_past_maxpool),
    ("swap_scale_past_pad", swap_scale_past_pad),
    ("fold_affine", fold_affine),
    ("merge_pad", merge_pad),
    ("normalize_matmul", _normalize_matmul_pass),
)


def run_pipeline(g: Graph, dump_dir=None) -> tuple[Graph, list[PassReport]]:
    """Run the full rewrite sequence; optionally dump the graph after every pass."""
    reports: list[PassReport] = []
    step = 0

    def run(name, fn, graph):
        nonlocal step
        rep = PassReport(name)
        out = fn(graph, rep)
        reports.append(rep)
        if dump_dir is not None:
            d = Path(dump_dir) / f"{step:02d}_{name}"
            save_graph(out, d / "graph.json")
            (d / "report.txt").write_text(rep.summary() + "\n")
        step += 1
        return out

    g = infer_shapes(g)
    g = run("decompose_batchnorm", decompose_batchnorm, g)
    swaps = PASSES[1:4]
    while True:
        before = g
        for name, fn in swaps:
            g = run(name, fn, g)
        if g == before:
            break
    for name, fn in PASSES[4:]:
        g = run(name, fn, g)
    return g, reports
