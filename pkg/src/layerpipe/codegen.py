"""Emission of a compiled design directory and loading it back.

Layout::

    manifest.json             every module instance, its parameters and edges
    graph/graph.json, blobs/  the transformed, pruned and quantized graph
    mem/<node>_split<k>.hex   one weight stream per channel split
    mem/<node>_oc_counts.txt  per-output-channel entry counts
    report/balance.csv        per-stage cost before and after balancing
    report/summary.txt        human-readable plan summary

Everything is written with sorted keys and fixed float formatting so that
identical inputs give byte-identical directories.
"""

from __future__ import annotations

import csv
import io
import json
import re
from pathlib import Path

import numpy as np

from .graph import CONV_KINDS, FixedPointFormat, Graph, OpKind, infer_shapes, load_graph, node_kernel, save_graph
from .interp import dequantize, quantize, quantized_weights
from .planner import PlanSet
from .sparsity import EncodedLayer, encode_layer, read_layer_files, write_layer_files

MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


def file_stem(node_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", node_id)


def quantize_parameters(g: Graph) -> Graph:
    """Snap weights and biases onto their fixed-point grids (exactly representable as float32)."""
    nodes = []
    for n in g:
        ch = {}
        if n.weights is not None:
            ch["weights"] = dequantize(quantize(n.weights, n.wformat), n.wformat)
        if n.bias is not None:
            ch["bias"] = dequantize(quantize(n.bias, n.wformat), n.wformat)
        nodes.append(n.replace(**ch) if ch else n)
    return g.with_nodes(nodes)


def encode_streams(g: Graph, plans: PlanSet) -> dict[str, EncodedLayer]:
    """Encode every convolution-family node at its planned split count."""
    layers = {}
    for n in g:
        if n.kind in CONV_KINDS:
            layers[n.id] = encode_layer(quantized_weights(n), plans[n.id].S, plans.rl_bits, n.wformat,
                                        n.kind is OpKind.DEPTHWISE, quantized=True)
    return layers


def _check(g: Graph, plans: PlanSet, layers: dict[str, EncodedLayer]) -> None:
    for n in g:
        if n.id not in plans.plans:
            raise ManifestError(f"node {n.id} has no plan")
        if n.kind in CONV_KINDS:
            layer = layers.get(n.id)
            p = plans[n.id]
            if layer is None:
                raise ManifestError(f"node {n.id} has no weight streams")
            if layer.S != p.S or int(layer.counts.sum()) + p.overhead != p.cycles_per_line:
                raise ManifestError(f"node {n.id}: streams disagree with the plan")


def build_manifest(g: Graph, plans: PlanSet, layers: dict[str, EncodedLayer], files: dict[str, list[str]]) -> dict:
    nodes = {}
    for n in g:
        d = {
            "kind": n.kind.value,
            "inputs": list(n.inputs),
            "out_shape": list(n.out_shape.as_tuple()),
            "precision": n.precision.to_json(),
            "plan": plans[n.id].to_json(),
        }
        if n.kind in CONV_KINDS or n.kind is OpKind.MAXPOOL:
            d["kernel"] = node_kernel(n).to_json()
        if n.kind in CONV_KINDS:
            layer = layers[n.id]
            d["weight_precision"] = n.wformat.to_json()
            d["stream"] = {
                "S": layer.S,
                "kh": layer.kh,
                "kw": layer.kw,
                "c_in": layer.c_in,
                "c_out": layer.c_out,
                "depthwise": layer.depthwise,
                "rl_bits": layer.rl_bits,
                "x_bits": layer.x_bits,
                "weight_bits": layer.weight_format.bits,
                "entries_per_line": int(layer.counts.sum()),
                "hex": [f"mem/{f}" for f in files[n.id][:-1]],
                "counts": f"mem/{files[n.id][-1]}",
            }
        nodes[n.id] = d
    edges = []
    for n in g:
        for p, src in enumerate(n.inputs):
            edges.append({"src": src, "dst": n.id, "port": p, "line_shape": [g[src].out_shape.w, g[src].out_shape.c],
                          "lines": g[src].out_shape.h})
    return {
        "version": MANIFEST_VERSION,
        "graph": "graph/graph.json",
        "outputs": list(g.outputs),
        "dsp_target": plans.dsp_target,
        "total_dsps": plans.total_dsps,
        "frequency_mhz": plans.frequency_mhz,
        "overhead": plans.overhead,
        "rl_bits": plans.rl_bits,
        "bottleneck": plans.bottleneck,
        "bottleneck_cycles": plans.bottleneck_cycles,
        "images_per_second": round(plans.images_per_second, 6),
        "unbalanced_cycles": dict(sorted(plans.unbalanced_cycles.items())),
        "nodes": nodes,
        "edges": edges,
    }


def balance_csv(g: Graph, plans: PlanSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node", "kind", "S", "lane_width", "dsps", "unbalanced_cycles_per_image", "cycles_per_image",
                "cycles_per_line", "saturated"])
    for n in g:
        p = plans[n.id]
        w.writerow([n.id, n.kind.value, p.S, p.lane_width, p.dsps, plans.unbalanced_cycles.get(n.id, p.cycles_per_image),
                    p.cycles_per_image, p.cycles_per_line, int(p.saturated)])
    return buf.getvalue()


def summary_text(g: Graph, plans: PlanSet) -> str:
    lines = [f"{'node':<24} {'kind':<16} {'S':>4} {'dsps':>6} {'cyc/line':>9} {'cyc/image':>10} depths"]
    for n in g:
        p = plans[n.id]
        depths = ",".join(str(d) for d in p.depths) or "-"
        lines.append(f"{n.id:<24} {n.kind.value:<16} {p.S:>4} {p.dsps:>6} {p.cycles_per_line:>9} "
                     f"{p.cycles_per_image:>10} {depths}")
    unb = max(plans.unbalanced_cycles.values()) if plans.unbalanced_cycles else plans.bottleneck_cycles
    lines += [
        "",
        f"total DSPs        {plans.total_dsps} / {plans.dsp_target}",
        f"bottleneck        {plans.bottleneck} ({plans.bottleneck_cycles} cycles/image)",
        f"unbalanced        {unb} cycles/image",
        f"images/s          {plans.images_per_second:.1f} at {plans.frequency_mhz:g} MHz",
    ]
    return "\n".join(lines) + "\n"


def emit(g: Graph, plans: PlanSet, layers: dict[str, EncodedLayer], out_dir) -> Path:
    """Write the compiled design to ``out_dir`` and return the manifest path."""
    out = Path(out_dir)
    g = infer_shapes(g)
    _check(g, plans, layers)
    (out / "mem").mkdir(parents=True, exist_ok=True)
    (out / "report").mkdir(parents=True, exist_ok=True)
    save_graph(g, out / "graph" / "graph.json")
    files = {}
    for nid in sorted(layers):
        files[nid] = write_layer_files(layers[nid], file_stem(nid), out / "mem")
    manifest = build_manifest(g, plans, layers, files)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (out / "report" / "balance.csv").write_text(balance_csv(g, plans))
    (out / "report" / "summary.txt").write_text(summary_text(g, plans))
    return path


def load(out_dir) -> tuple[Graph, PlanSet, dict[str, EncodedLayer]]:
    """Rebuild graph, plan and weight streams solely from an emitted directory."""
    out = Path(out_dir)
    try:
        m = json.loads((out / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest in {out}: {e}") from None
    if m.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {m.get('version')!r}")
    g = infer_shapes(load_graph(out / m["graph"]))
    if set(g.nodes) != set(m["nodes"]):
        raise ManifestError("manifest nodes do not match the stored graph")
    plans = PlanSet.from_json({"nodes": {k: v["plan"] for k, v in m["nodes"].items()}, "dsp_target": m["dsp_target"],
                               "overhead": m["overhead"], "rl_bits": m["rl_bits"],
                               "frequency_mhz": m["frequency_mhz"]})
    plans.unbalanced_cycles = {k: int(v) for k, v in m.get("unbalanced_cycles", {}).items()}
    layers = {}
    for nid, d in m["nodes"].items():
        st = d.get("stream")
        if st is None:
            continue
        wp = d["weight_precision"]
        layers[nid] = read_layer_files(out / "mem", file_stem(nid), kh=st["kh"], kw=st["kw"], c_in=st["c_in"],
                                       c_out=st["c_out"], S=st["S"], rl_bits=st["rl_bits"], x_bits=st["x_bits"],
                                       weight_format=FixedPointFormat(wp["bits"], wp["frac"]),
                                       depthwise=st["depthwise"])
    _check(g, plans, layers)
    return g, plans, layers


def images_equal(a: np.ndarray, b: np.ndarray):
    """None when equal, else the index of the first differing element."""
    if a.shape != b.shape:
        return ()
    diff = np.argwhere(a != b)
    return None if len(diff) == 0 else tuple(int(i) for i in diff[0])
