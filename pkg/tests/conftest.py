import numpy as np
import pytest
from hypothesis import settings

from layerpipe.graph import Graph, KernelSpec, Node, OpKind, TensorShape, infer_shapes, validate

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


def make_graph(nodes, outputs=None) -> Graph:
    nodes = list(nodes)
    outputs = outputs or [nodes[-1].id]
    return validate(infer_shapes(Graph({n.id: n for n in nodes}, tuple(outputs))))


def placeholder(h=6, w=6, c=3, nid="x") -> Node:
    return Node(nid, OpKind.PLACEHOLDER, shape=TensorShape(h, w, c))


def conv(nid, src, w, stride=1, pad=0, kind=OpKind.CONV2D) -> Node:
    kh, kw = w.shape[:2]
    return Node(nid, kind, (src,), kernel=KernelSpec(kh, kw, stride, stride, pad, pad, pad, pad), weights=w)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
