"""Seeded generators for small test networks.

Three families: ``resnet-like`` (stem plus bottleneck residual blocks),
``mobilenet-like`` (depthwise-separable stacks with Relu6 and optional
inverted residuals) and ``random-dag`` (random chains with nested skips).
Weights are He-scaled so activations stay well inside the default 16-bit
format; BatchNorm parameters are random but sane (positive gamma and var).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import BNParams, Graph, KernelSpec, Node, OpKind, TensorShape, infer_shapes, save_graph, validate

FAMILIES = ("resnet-like", "mobilenet-like", "random-dag")
# kernel (kh, kw) of the skewed_chain stages; areas 1..10, 6 and 35 sum to 96
SKEWED_SHAPES = ((1, 1), (1, 2), (1, 3), (2, 2), (1, 5), (2, 3), (1, 7), (2, 4), (3, 3), (2, 5), (1, 6), (5, 7))


@dataclass(frozen=True)
class NetSpec:
    family: str = "resnet-like"
    depth: int = 1
    channels: int = 8
    input_shape: tuple[int, int, int] = (16, 16, 3)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown network family {self.family!r}; choose from {FAMILIES}")
        if self.depth < 1 or self.channels < 1:
            raise ValueError("depth and channels must be positive")


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.nodes: list[Node] = []
        self.counter: dict[str, int] = {}
        self.shapes: dict[str, TensorShape] = {}

    def _id(self, prefix: str) -> str:
        k = self.counter.get(prefix, 0) + 1
        self.counter[prefix] = k
        return f"{prefix}{k:02d}"

    def add(self, node: Node) -> str:
        self.nodes.append(node)
        g = infer_shapes(Graph({n.id: n for n in self.nodes}, (node.id,)))
        self.shapes[node.id] = g[node.id].out_shape
        return node.id

    def channels(self, x: str) -> int:
        return self.shapes[x].c

    def placeholder(self, shape) -> str:
        return self.add(Node("input", OpKind.PLACEHOLDER, shape=TensorShape(*shape)))

    def conv(self, x: str, co: int, k: int = 1, stride: int = 1, pad: Optional[int] = None) -> str:
        ci = self.channels(x)
        w = self.rng.normal(0.0, np.sqrt(2.0 / (k * k * ci)), size=(k, k, ci, co))
        p = (k - 1) // 2 if pad is None else pad
        spec = KernelSpec(k, k, stride, stride, p, k - 1 - p if pad is None else p, p, k - 1 - p if pad is None else p)
        return self.add(Node(self._id("conv"), OpKind.CONV2D, (x,), kernel=spec, weights=w))

    def depthwise(self, x: str, k: int = 3, stride: int = 1) -> str:
        c = self.channels(x)
        w = self.rng.normal(0.0, np.sqrt(2.0 / (k * k)), size=(k, k, c, 1))
        p = (k - 1) // 2
        spec = KernelSpec(k, k, stride, stride, p, k - 1 - p, p, k - 1 - p)
        return self.add(Node(self._id("dw"), OpKind.DEPTHWISE, (x,), kernel=spec, weights=w))

    def pad(self, x: str, p: int) -> str:
        return self.add(Node(self._id("pad"), OpKind.PAD, (x,), pad=(p, p, p, p)))

    def bn(self, x: str) -> str:
        c = self.channels(x)
        r = self.rng
        params = BNParams(r.uniform(0.5, 1.5, c), r.uniform(-0.2, 0.2, c), r.uniform(-0.1, 0.1, c),
                          r.uniform(0.5, 1.5, c), eps=1e-3)
        return self.add(Node(self._id("bn"), OpKind.BATCHNORM, (x,), bn=params))

    def bias(self, x: str) -> str:
        c = self.channels(x)
        return self.add(Node(self._id("bias"), OpKind.BIAS_ADD, (x,), bias=self.rng.uniform(-0.1, 0.1, c)))

    def relu(self, x: str) -> str:
        return self.add(Node(self._id("relu"), OpKind.RELU, (x,)))

    def relu6(self, x: str) -> str:
        return self.add(Node(self._id("relu6_"), OpKind.RELU6, (x,)))

    def maxpool(self, x: str, k: int = 3, stride: int = 2, pad: int = 0) -> str:
        return self.add(Node(self._id("pool"), OpKind.MAXPOOL, (x,), kernel=KernelSpec(k, k, stride, stride, pad, pad, pad, pad)))

    def add_(self, a: str, b: str) -> str:
        return self.add(Node(self._id("add"), OpKind.ADD, (a, b)))

    def mean(self, x: str) -> str:
        return self.add(Node(self._id("mean"), OpKind.MEAN, (x,)))

    def matmul(self, x: str, co: int) -> str:
        ci = self.channels(x)
        w = self.rng.normal(0.0, np.sqrt(1.0 / ci), size=(1, 1, ci, co))
        return self.add(Node(self._id("fc"), OpKind.MATMUL, (x,), weights=w))

    def graph(self, outputs: list[str]) -> Graph:
        return validate(infer_shapes(Graph({n.id: n for n in self.nodes}, tuple(outputs))))


def _conv_bn_relu(b: _Builder, x: str, co: int, k: int, stride: int = 1, relu: bool = True) -> str:
    if k > 1:
        x = b.pad(x, (k - 1) // 2)
        x = b.conv(x, co, k, stride, pad=0)
    else:
        x = b.conv(x, co, 1, stride)
    x = b.bn(x)
    return b.relu(x) if relu else x


def _resnet(spec: NetSpec) -> Graph:
    b = _Builder(spec.seed)
    x = b.placeholder(spec.input_shape)
    c = spec.channels
    big = min(spec.input_shape[:2]) >= 16
    # stem: Pad -> Conv -> BN -> Relu -> Pad -> MaxPool. Odd seeds instead put the
    # BN after the Relu and pad inside the pool, so the affine parts have to be
    # moved across the pool and folded into the first block's 1x1 convolutions.
    x = b.pad(x, 1)
    x = b.conv(x, c, 3, 2 if big else 1, pad=0)
    if spec.seed % 2:
        x = b.bn(b.relu(x))
        x = b.maxpool(x, 3, 2 if big else 1, pad=1)
    else:
        x = b.relu(b.bn(x))
        x = b.maxpool(b.pad(x, 1), 3, 2 if big else 1, pad=0)
    for i in range(spec.depth):
        cin = b.channels(x)
        mid = c
        cout = 2 * c
        y = _conv_bn_relu(b, x, mid, 1)
        y = _conv_bn_relu(b, y, mid, 3)
        y = _conv_bn_relu(b, y, cout, 1, relu=False)
        if cin != cout:
            skip = _conv_bn_relu(b, x, cout, 1, relu=False)
        else:
            skip = x
        x = b.relu(b.add_(y, skip))
    x = b.mean(x)
    x = b.matmul(x, 10)
    x = b.bias(x)
    return b.graph([x])


def _mobilenet(spec: NetSpec) -> Graph:
    b = _Builder(spec.seed)
    x = b.placeholder(spec.input_shape)
    c = spec.channels
    x = b.relu6(b.bn(b.conv(x, c, 3, 1)))
    residual = spec.seed % 2 == 0
    for i in range(spec.depth):
        inp = x
        if residual:
            # inverted residual: expand 1x1, depthwise 3x3, project 1x1, add
            y = b.relu6(b.bn(b.conv(x, 2 * c, 1)))
            y = b.relu6(b.bn(b.depthwise(y, 3, 1)))
            y = b.bn(b.conv(y, c, 1))
            x = b.add_(y, inp)
        else:
            y = b.relu6(b.bn(b.depthwise(x, 3, 2 if i == 0 and min(spec.input_shape[:2]) >= 8 else 1)))
            x = b.relu6(b.bn(b.conv(y, c, 1)))
    x = b.mean(x)
    x = b.bias(b.matmul(x, 10))
    return b.graph([x])


def _random_dag(spec: NetSpec) -> Graph:
    b = _Builder(spec.seed)
    r = b.rng
    x = b.placeholder(spec.input_shape)
    c = spec.channels
    x = b.relu(b.bias(b.conv(x, c, 3, 1)))

    def body(x: str, depth: int) -> str:
        n_layers = int(r.integers(1, 4))
        for _ in range(n_layers):
            choice = r.random()
            if choice < 0.45:
                k = int(r.choice([1, 3]))
                stride = 2 if (r.random() < 0.15 and b.shapes[x].h >= 4) else 1
                x = b.conv(x, b.channels(x), k, stride)
                x = b.bn(x) if r.random() < 0.5 else b.bias(x)
                x = b.relu(x)
            elif choice < 0.6:
                x = b.relu(b.bias(b.depthwise(x, 3, 1)))
            elif choice < 0.75 and b.shapes[x].h >= 3:
                x = b.maxpool(x, 3, 1, pad=1) if b.nodes[-1].kind in (OpKind.RELU, OpKind.RELU6) else b.relu(x)
            elif depth < 2:
                x = block(x, depth + 1)
            else:
                x = b.relu(b.bias(b.conv(x, b.channels(x), 1)))
        return x

    def block(x: str, depth: int) -> str:
        y = body(x, depth)
        if b.shapes[y] != b.shapes[x]:
            s = b.shapes[x].h // b.shapes[y].h
            hx, wx = b.shapes[x].h, b.shapes[x].w
            if ((hx - 1) // s + 1, (wx - 1) // s + 1) != (b.shapes[y].h, b.shapes[y].w):
                return y  # a 1x1 projection cannot line up; leave this block without a skip
            skip = b.bias(b.conv(x, b.channels(y), 1, s))
        else:
            skip = x
        return b.relu(b.add_(y, skip))

    for _ in range(spec.depth):
        x = block(x, 0)
    if r.random() < 0.5:
        x = b.bias(b.matmul(b.mean(x), 4))
    return b.graph([x])


def generate(spec: NetSpec) -> Graph:
    """Build the network described by ``spec``; identical specs give identical graphs."""
    if spec.family == "resnet-like":
        return _resnet(spec)
    if spec.family == "mobilenet-like":
        return _mobilenet(spec)
    return _random_dag(spec)


def write(spec: NetSpec, out_dir) -> Path:
    """Generate and save ``spec`` as ``out_dir/graph.json`` plus blobs."""
    return save_graph(generate(spec), Path(out_dir) / "graph.json")


def skewed_chain(seed: int = 0, sparsity: float = 0.0, channels: int = 180, size: int = 8) -> Graph:
    """Twelve same-width convolutions whose per-line entry counts span over 30:1.

    The kernel areas sum to 96, so a DSP budget of eight times the all-``S=1``
    cost is just enough to bring every stage near the cost of the cheapest
    one. Weights are He-scaled, so fixed-point rounding zeroes a larger share
    of the big kernels; the 35-tap kernel still keeps over 30 times the
    entries of the 1x1 one. ``channels`` has many small divisors so integer
    channel splits leave small partition remainders.
    """
    from .sparsity import prune_magnitude

    rng = np.random.default_rng(seed)
    shapes = list(SKEWED_SHAPES)
    order = rng.permutation(len(shapes))
    nodes = [Node("input", OpKind.PLACEHOLDER, shape=TensorShape(size, size, channels))]
    x = "input"
    for i, j in enumerate(order):
        kh, kw = shapes[j]
        w = rng.normal(0.0, np.sqrt(1.0 / (kh * kw * channels)), size=(kh, kw, channels, channels))
        if sparsity:
            w = prune_magnitude(w, sparsity)
        spec = KernelSpec(kh, kw, 1, 1, (kh - 1) // 2, kh - 1 - (kh - 1) // 2, (kw - 1) // 2, kw - 1 - (kw - 1) // 2)
        nid = f"conv{i + 1:02d}"
        nodes.append(Node(nid, OpKind.CONV2D, (x,), kernel=spec, weights=w))
        x = nid
    return validate(infer_shapes(Graph({n.id: n for n in nodes}, (x,))))
