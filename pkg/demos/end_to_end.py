"""Generate a small residual network, compile it at 85% sparsity and simulate it.

    python3 demos/end_to_end.py [output_dir]
"""

import sys
import tempfile

from layerpipe import codegen, flow
from layerpipe.interp import eval_graph
from layerpipe.netgen import NetSpec, generate
from layerpipe.pipesim import simulate


def main(out_dir):
    g = generate(NetSpec("resnet-like", depth=2, channels=8, input_shape=(16, 16, 3), seed=0))
    c = flow.compile_graph(g, sparsity=0.85, budget=4.0)
    codegen.emit(c.graph, c.plans, c.layers, out_dir)
    print(codegen.summary_text(c.graph, c.plans))

    images = flow.random_images(c.graph, 6, seed=1)
    rep = simulate(c.graph, c.plans, c.layers, images)
    exact = all(
        codegen.images_equal(out[o], eval_graph(c.graph, img, "fixed")[o]) is None
        for out, img in zip(rep.outputs, images)
        for o in c.graph.outputs
    )
    print(f"{'stage':<16} {'busy':>7} {'stall in':>9} {'stall bp':>9} {'cyc/line':>9}")
    for nid, s in rep.stages.items():
        cpl = f"{s.cycles_per_line:.1f}" if s.cycles_per_line is not None else "-"
        print(f"{nid:<16} {s.busy:>7} {s.stall_input:>9} {s.stall_backpressure:>9} {cpl:>9}")
    print(f"\nfirst output after {rep.first_output_latency} cycles, initiation interval {rep.initiation_interval}")
    print(f"planned bottleneck {c.plans.bottleneck} at {c.plans.bottleneck_cycles} cycles/image")
    print(f"bit-exact vs interpreter: {exact}; design written to {out_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="layerpipe_"))
