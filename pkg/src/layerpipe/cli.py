"""Command-line front end.

Subcommands: ``compile``, ``simulate``, ``verify-transforms``, ``report`` and
``netgen``. Every failure exits nonzero with a message tagged by the phase
that failed, e.g. ``error [balance]: target infeasible ...``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import codegen, flow, netgen, planner, transforms
from .graph import CONV_KINDS, Graph, GraphError, apply_precisions, infer_shapes, load_graph, read_blob, write_blob
from .interp import eval_graph, max_relative_error
from .pipesim import SimulationError, SimulationTimeout, simulate
from .sparsity import FieldOverflowError, StreamDecodeError

VERIFY_TOLERANCE = 1e-4


class PhaseError(Exception):
    def __init__(self, phase: str, msg: str):
        super().__init__(msg)
        self.phase = phase


def _phase(name: str, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except PhaseError:
        raise
    except (GraphError, OSError, ValueError, KeyError, SimulationError) as e:
        raise PhaseError(name, str(e)) from e


def _load_input_graph(args) -> Graph:
    g = _phase("load", load_graph, args.graph)
    if args.precisions:
        ann = _phase("load", lambda: json.loads(Path(args.precisions).read_text()))
        g = _phase("load", apply_precisions, g, ann)
    return _phase("load", infer_shapes, g)


# ---------------------------------------------------------------------------


def cmd_compile(args) -> int:
    if not 0 <= args.sparsity < 1:
        raise PhaseError("config", f"--sparsity must be in [0, 1), got {args.sparsity}")
    if args.dsp_target < 1:
        raise PhaseError("config", "--dsp-target must be at least 1")
    g = _load_input_graph(args)
    g, reports = _phase("transforms", transforms.run_pipeline, g, args.dump_passes)
    g = _phase("prune", flow.prune, g, args.sparsity)
    g = _phase("quantize", codegen.quantize_parameters, g)
    plans = _phase("balance", planner.balance, g, args.dsp_target, overhead=args.overhead_cycles,
                   rl_bits=args.rl_bits, frequency_mhz=args.frequency_mhz)
    plans = _phase("buffers", planner.assign_buffer_depths, g, plans)
    layers = _phase("encode", codegen.encode_streams, g, plans)
    out = Path(args.out)
    _phase("emit", codegen.emit, g, plans, layers, out)
    (out / "plan.json").write_text(plans.dumps() + "\n")
    sys.stdout.write(codegen.summary_text(g, plans))
    return 0


def _read_images(paths: list[str], g) -> list[np.ndarray]:
    files: list[Path] = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.glob("*.bin")) if p.is_dir() else [p])
    shape = g.placeholder.out_shape.as_tuple()
    out = []
    for f in files:
        a = read_blob(f).astype(np.float64)
        if a.size != np.prod(shape):
            raise ValueError(f"image {f} holds {a.size} values, placeholder needs {shape}")
        out.append(a.reshape(shape))
    if not out:
        raise ValueError("no input images found")
    return out


def cmd_simulate(args) -> int:
    out = Path(args.out)
    try:
        g, plans, layers = codegen.load(out)
    except (StreamDecodeError, FieldOverflowError) as e:
        print(f"FAIL: stream decode error: {e}")
        return 1
    except (codegen.ManifestError, GraphError, OSError) as e:
        raise PhaseError("load", str(e)) from e
    if args.images:
        images = _phase("load", _read_images, args.images, g)
    else:
        images = flow.random_images(g, args.num_images, args.seed)
    try:
        rep = simulate(g, plans, layers, images, max_cycles=args.max_cycles, trace=args.trace)
    except SimulationTimeout as e:
        raise PhaseError("simulate", str(e)) from e
    except StreamDecodeError as e:
        print(f"FAIL: stream decode error: {e}")
        return 1
    (out / "report").mkdir(exist_ok=True)
    (out / "report" / "sim_report.json").write_text(rep.dumps() + "\n")
    if rep.deadlock:
        stalled = {k: v["state"] for k, v in rep.deadlock_snapshot.items() if v["state"] != "idle"}
        print(f"FAIL: deadlock at cycle {rep.cycles}; stalled stages: {stalled}")
        return 1
    for i, img in enumerate(images):
        ref = eval_graph(g, img, "fixed")
        for o in g.outputs:
            where = codegen.images_equal(rep.outputs[i][o], ref[o])
            if where is not None:
                print(f"FAIL: image {i} output {o} differs from the interpreter at index {where}")
                return 1
    print(f"cycles {rep.cycles}  first output {rep.first_output_latency}  "
          f"initiation interval {rep.initiation_interval}  plan bottleneck {plans.bottleneck_cycles}")
    print(f"PASS: {len(images)} images bit-exact against the fixed-point interpreter")
    return 0


def _inject_fold_fault(g, reports):
    """Test hook: perturb the weights of a convolution the fold pass rewrote."""
    rewritten = [k for r in reports if r.name == "fold_affine" for k in r.rewritten]
    for nid in rewritten + [n.id for n in g]:
        if nid in g.nodes and g[nid].kind in CONV_KINDS:
            n = g[nid]
            return g.with_nodes([n.replace(weights=n.weights * 1.05) if m.id == nid else m for m in g])
    return g


def cmd_verify_transforms(args) -> int:
    g0 = _load_input_graph(args)
    g1, reports = _phase("transforms", transforms.run_pipeline, g0, args.dump_passes)
    if args.inject_fold_fault:
        g1 = _inject_fold_fault(g1, reports)
    for r in reports:
        if not r.empty:
            print(r.summary().splitlines()[0])
    worst = 0.0
    for x in flow.random_images(g0, args.num_images, args.seed):
        a, b = eval_graph(g0, x), eval_graph(g1, x)
        for o in g0.outputs:
            worst = max(worst, max_relative_error(b[o], a[o]))
    ok = worst <= VERIFY_TOLERANCE
    print(f"max relative error {worst:.3e}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_report(args) -> int:
    out = Path(args.out)
    g, plans, _ = _phase("load", codegen.load, out)
    sys.stdout.write(codegen.summary_text(g, plans))
    sim = out / "report" / "sim_report.json"
    if sim.exists():
        d = json.loads(sim.read_text())
        print(f"simulated initiation interval {d['initiation_interval']}, "
              f"first output latency {d['first_output_latency']}")
    return 0


def cmd_netgen(args) -> int:
    try:
        shape = tuple(int(v) for v in args.input_shape.lower().split("x"))
        if len(shape) != 3:
            raise ValueError
    except ValueError:
        raise PhaseError("config", f"--input-shape must look like 16x16x3, got {args.input_shape!r}") from None
    spec = _phase("config", netgen.NetSpec, args.family, args.depth, args.channels, shape, args.seed)
    path = _phase("netgen", netgen.write, spec, args.out)
    if args.images:
        g = netgen.generate(spec)
        d = Path(args.out) / "images"
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(flow.random_images(g, args.images, args.seed)):
            write_blob(d / f"image{i:03d}.bin", img[..., None])
    print(path)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="layerpipe", description="Layer-pipelined sparse CNN compiler and simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="transform, prune, balance, encode and emit a design")
    c.add_argument("--graph", required=True, help="graph JSON file")
    c.add_argument("--precisions", help="JSON precision annotations {node: {bits, frac, ...}}")
    c.add_argument("--sparsity", type=float, default=0.0, help="magnitude pruning rate in [0, 1)")
    c.add_argument("--dsp-target", type=int, required=True)
    c.add_argument("--frequency-mhz", type=float, default=300.0)
    c.add_argument("--overhead-cycles", type=int, default=planner.DEFAULT_OVERHEAD)
    c.add_argument("--rl-bits", type=int, default=planner.DEFAULT_RL_BITS)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--dump-passes", help="write the graph after every transform pass here")
    c.set_defaults(func=cmd_compile)

    s = sub.add_parser("simulate", help="simulate a compiled design and check it against the interpreter")
    s.add_argument("--out", required=True, help="compiled design directory")
    s.add_argument("--images", nargs="*", help="input image blobs or directories of .bin blobs")
    s.add_argument("--num-images", type=int, default=4, help="random images when --images is not given")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-cycles", type=int, default=50_000_000)
    s.add_argument("--trace", help="write a per-stage state trace CSV here")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify-transforms", help="compare a graph before and after the rewrite passes")
    v.add_argument("--graph", required=True)
    v.add_argument("--precisions")
    v.add_argument("--num-images", type=int, default=4)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--dump-passes")
    v.add_argument("--inject-fold-fault", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify_transforms)

    r = sub.add_parser("report", help="print the plan summary of a compiled design")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    n = sub.add_parser("netgen", help="write a generated test network")
    n.add_argument("--family", choices=netgen.FAMILIES, default="resnet-like")
    n.add_argument("--depth", type=int, default=1)
    n.add_argument("--channels", type=int, default=8)
    n.add_argument("--input-shape", default="16x16x3")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--images", type=int, default=0, help="also write this many random input blobs")
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_netgen)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PhaseError as e:
        print(f"error [{e.phase}]: {e}", file=sys.stderr)
        return 2
