"""The compile flow as plain functions, shared by the CLI, tests and demos."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import planner, transforms
from .codegen import encode_streams, quantize_parameters
from .graph import CONV_KINDS, Graph, infer_shapes
from .planner import PlanSet
from .sparsity import EncodedLayer, prune_magnitude


@dataclass
class Compiled:
    graph: Graph
    plans: PlanSet
    layers: dict[str, EncodedLayer]
    reports: list


def prune(g: Graph, rate: float) -> Graph:
    """Magnitude-prune every convolution-family node to ``rate``."""
    if rate == 0:
        return g
    return g.with_nodes([n.replace(weights=prune_magnitude(n.weights, rate)) if n.kind in CONV_KINDS else n
                         for n in g])


def prepare(g: Graph, sparsity: float = 0.0, dump_dir=None) -> tuple[Graph, list]:
    """Transforms, pruning and weight quantization: the graph that goes to hardware."""
    g, reports = transforms.run_pipeline(infer_shapes(g), dump_dir)
    return infer_shapes(quantize_parameters(prune(g, sparsity))), reports


def s1_dsps(g: Graph) -> int:
    """DSPs of the all ``S = 1`` design, the smallest feasible target."""
    g = infer_shapes(g)
    return sum(planner.dsp_cost(n, 1)[1] for n in g)


def compile_graph(g: Graph, dsp_target: Optional[int] = None, sparsity: float = 0.0, budget: float = 2.0,
                  dump_dir=None, **kw) -> Compiled:
    """Full flow up to encoded streams; ``dsp_target`` defaults to ``budget`` times the S=1 cost."""
    hw, reports = prepare(g, sparsity, dump_dir)
    target = dsp_target if dsp_target is not None else int(budget * s1_dsps(hw))
    plans = planner.compile_plan(hw, target, **kw)
    return Compiled(hw, plans, encode_streams(hw, plans), reports)


def random_images(g: Graph, n: int, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    shape = g.placeholder.out_shape.as_tuple()
    return [rng.uniform(-1.0, 1.0, shape) for _ in range(n)]
