"""Network graph representation, on-disk format, validation and shape inference.

Activations are 3-D ``(H, W, C)`` tensors (batch is always 1). Weights use the
``(kh, kw, ci, co)`` layout everywhere; depthwise kernels are ``(kh, kw, C, 1)``.
"""

from __future__ import annotations

import dataclasses
import enum
import heapq
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np


class GraphError(ValueError):
    """Raised for structurally invalid graphs (cycles, arity, missing data)."""


class GraphFormatError(GraphError):
    """Raised when a graph file cannot be parsed."""


class ShapeError(GraphError):
    """Raised when shape inference fails."""


class OpKind(str, enum.Enum):
    PLACEHOLDER = "Placeholder"
    CONV2D = "Conv2D"
    DEPTHWISE = "DepthwiseConv2D"
    MATMUL = "MatMul"
    BIAS_ADD = "BiasAdd"
    MAXPOOL = "MaxPool"
    RELU = "Relu"
    RELU6 = "Relu6"
    ADD = "Add"
    MEAN = "Mean"
    BATCHNORM = "BatchNorm"
    PAD = "Pad"
    SCALE = "ScaleConst"
    SHIFT = "ShiftConst"


CONV_KINDS = frozenset({OpKind.CONV2D, OpKind.DEPTHWISE, OpKind.MATMUL})
WINDOWED_KINDS = frozenset({OpKind.CONV2D, OpKind.DEPTHWISE, OpKind.MATMUL, OpKind.MAXPOOL})


@dataclass(frozen=True)
class TensorShape:
    h: int
    w: int
    c: int

    def __post_init__(self):
        if min(self.h, self.w, self.c) < 1:
            raise ShapeError(f"non-positive tensor dimension in {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.c)

    @property
    def size(self) -> int:
        return self.h * self.w * self.c


@dataclass(frozen=True)
class KernelSpec:
    kh: int = 1
    kw: int = 1
    sh: int = 1
    sw: int = 1
    pt: int = 0
    pb: int = 0
    pl: int = 0
    pr: int = 0

    def __post_init__(self):
        if self.kh < 1 or self.kw < 1:
            raise GraphError(f"kernel size must be >= 1, got {self.kh}x{self.kw}")
        if self.sh < 1 or self.sw < 1:
            raise GraphError(f"strides must be >= 1, got {self.sh}x{self.sw}")
        if min(self.pt, self.pb, self.pl, self.pr) < 0:
            raise GraphError("padding must be non-negative")

    @property
    def unpadded(self) -> bool:
        return self.pt == self.pb == self.pl == self.pr == 0

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + self.pt + self.pb - self.kh) // self.sh + 1
        ow = (w + self.pl + self.pr - self.kw) // self.sw + 1
        return oh, ow

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "KernelSpec":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed two's-complement fixed point: ``bits`` total, ``frac`` fractional."""

    bits: int = 16
    frac: int = 8

    def __post_init__(self):
        if not 2 <= self.bits <= 32:
            raise GraphError(f"fixed-point width must be in [2, 32], got {self.bits}")
        if not 0 <= self.frac <= self.bits - 1:
            raise GraphError(f"fraction bits must be in [0, {self.bits - 1}], got {self.frac}")

    @property
    def min_int(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def max_int(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def resolution(self) -> float:
        return 2.0 ** -self.frac

    def to_json(self) -> dict:
        return {"bits": self.bits, "frac": self.frac}

    @classmethod
    def from_json(cls, d: dict) -> "FixedPointFormat":
        return cls(int(d["bits"]), int(d["frac"]))


DEFAULT_FORMAT = FixedPointFormat(16, 8)


@dataclass(frozen=True)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-3

    def __eq__(self, other):
        if not isinstance(other, BNParams):
            return NotImplemented
        return self.eps == other.eps and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("gamma", "beta", "mean", "var")
        )

    @property
    def channels(self) -> int:
        return len(self.gamma)


def _frozen_array(a) -> Optional[np.ndarray]:
    if a is None:
        return None
    arr = np.array(a, dtype=np.float32)
    arr.setflags(write=False)
    return arr


_ARRAY_FIELDS = ("weights", "bias", "scale", "shift")


@dataclass(frozen=True, eq=False)
class Node:
    id: str
    kind: OpKind
    inputs: tuple[str, ...] = ()
    kernel: Optional[KernelSpec] = None
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None
    bn: Optional[BNParams] = None
    pad: Optional[tuple[int, int, int, int]] = None  # top, bottom, left, right
    clip: Optional[float] = None  # Relu6 upper bound
    shape: Optional[TensorShape] = None  # Placeholder input shape
    precision: FixedPointFormat = DEFAULT_FORMAT
    weight_precision: Optional[FixedPointFormat] = None
    out_shape: Optional[TensorShape] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        for name in _ARRAY_FIELDS:
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        if self.bn is not None:
            object.__setattr__(
                self,
                "bn",
                BNParams(*(_frozen_array(getattr(self.bn, k)) for k in ("gamma", "beta", "mean", "var")),
                         eps=float(self.bn.eps)),
            )
        if self.pad is not None:
            object.__setattr__(self, "pad", tuple(int(p) for p in self.pad))
        if self.kind is OpKind.RELU6 and self.clip is None:
            object.__setattr__(self, "clip", 6.0)

    def __eq__(self, other):
        if not isinstance(other, Node):
            return NotImplemented
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None

    def replace(self, **changes) -> "Node":
        return dataclasses.replace(self, **changes)

    @property
    def wformat(self) -> FixedPointFormat:
        """Format used for this node's weights and constants."""
        return self.weight_precision or self.precision


@dataclass(frozen=True, eq=False)
class Graph:
    nodes: dict[str, Node]
    outputs: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "outputs", tuple(self.outputs))

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            list(self.nodes) == list(other.nodes)
            and all(self.nodes[k] == other.nodes[k] for k in self.nodes)
            and self.outputs == other.outputs
        )

    __hash__ = None

    def __getitem__(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def __iter__(self):
        return iter(self.nodes.values())

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def placeholder(self) -> Node:
        (p,) = [n for n in self.nodes.values() if n.kind is OpKind.PLACEHOLDER]
        return p

    def consumers(self, node_id: str) -> list[str]:
        return [n.id for n in self.nodes.values() if node_id in n.inputs]

    def consumer_map(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {k: [] for k in self.nodes}
        for n in self.nodes.values():
            for i in n.inputs:
                if i in out and n.id not in out[i]:
                    out[i].append(n.id)
        return out

    def count(self, *kinds: OpKind) -> int:
        return sum(1 for n in self.nodes.values() if n.kind in kinds)

    def with_nodes(self, nodes: Iterable[Node], outputs: Optional[Iterable[str]] = None) -> "Graph":
        return Graph({n.id: n for n in nodes}, tuple(self.outputs if outputs is None else outputs))


# ---------------------------------------------------------------------------
# validation and ordering


_ARITY = {
    OpKind.PLACEHOLDER: 0,
    OpKind.ADD: 2,
}


def validate(g: Graph) -> Graph:
    """Check structural invariants; returns ``g`` unchanged or raises GraphError."""
    placeholders = [n.id for n in g if n.kind is OpKind.PLACEHOLDER]
    if len(placeholders) != 1:
        raise GraphError(f"graph must contain exactly one Placeholder, found {len(placeholders)}")
    for n in g:
        for i in n.inputs:
            if i not in g.nodes:
                raise GraphError(f"node {n.id}: unknown input {i}")
        want = _ARITY.get(n.kind, 1)
        if len(n.inputs) != want:
            raise GraphError(f"node {n.id}: {n.kind.value} expects {want} input(s), got {len(n.inputs)}")
        if n.kind in CONV_KINDS and n.weights is None:
            raise GraphError(f"node {n.id}: {n.kind.value} is missing weights")
        if n.kind in CONV_KINDS and n.weights is not None and n.weights.ndim != 4:
            raise GraphError(f"node {n.id}: weights must be 4-D (kh, kw, ci, co)")
        if n.kind is OpKind.BIAS_ADD and n.bias is None:
            raise GraphError(f"node {n.id}: BiasAdd is missing bias")
        if n.kind is OpKind.BATCHNORM and n.bn is None:
            raise GraphError(f"node {n.id}: BatchNorm is missing parameters")
        if n.kind is OpKind.SCALE and n.scale is None:
            raise GraphError(f"node {n.id}: ScaleConst is missing scale")
        if n.kind is OpKind.SHIFT and n.shift is None:
            raise GraphError(f"node {n.id}: ShiftConst is missing shift")
        if n.kind is OpKind.PAD and n.pad is None:
            raise GraphError(f"node {n.id}: Pad is missing pad amounts")
        if n.kind is OpKind.PLACEHOLDER and n.shape is None:
            raise GraphError(f"node {n.id}: Placeholder is missing its shape")
    for o in g.outputs:
        if o not in g.nodes:
            raise GraphError(f"unknown output {o}")
    cmap = g.consumer_map()
    for nid, cons in cmap.items():
        if not cons and nid not in g.outputs:
            raise GraphError(f"node {nid} has no consumers and is not an output")
    topo_order(g)
    return g


def topo_order(g: Graph) -> list[str]:
    """Kahn ordering with ties broken by ascending node id."""
    indeg = {k: 0 for k in g.nodes}
    cmap: dict[str, list[str]] = {k: [] for k in g.nodes}
    for n in g:
        for i in n.inputs:
            if i not in g.nodes:
                raise GraphError(f"node {n.id}: unknown input {i}")
            indeg[n.id] += 1
            cmap[i].append(n.id)
    ready = [k for k, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        k = heapq.heappop(ready)
        order.append(k)
        for c in cmap[k]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(g.nodes):
        stuck = sorted(k for k, d in indeg.items() if d > 0)
        raise GraphError(f"cycle detected among nodes {stuck}")
    return order


# ---------------------------------------------------------------------------
# shape inference


def _conv_kernel(n: Node) -> KernelSpec:
    kh, kw = n.weights.shape[:2]
    k = n.kernel or KernelSpec(kh, kw)
    if (k.kh, k.kw) != (kh, kw):
        raise ShapeError(f"node {n.id}: kernel spec {k.kh}x{k.kw} disagrees with weights {kh}x{kw}")
    return k


def node_kernel(n: Node) -> KernelSpec:
    """Effective window spec of a windowed node (MatMul counts as 1x1)."""
    if n.kind in CONV_KINDS:
        return _conv_kernel(n)
    if n.kind is OpKind.MAXPOOL:
        if n.kernel is None:
            raise ShapeError(f"node {n.id}: MaxPool needs a kernel spec")
        return n.kernel
    return KernelSpec()


def _infer(n: Node, ins: list[TensorShape]) -> TensorShape:
    k = n.kind
    if k is OpKind.PLACEHOLDER:
        return n.shape
    x = ins[0]
    if k is OpKind.CONV2D:
        spec = _conv_kernel(n)
        if n.weights.shape[2] != x.c:
            raise ShapeError(f"node {n.id}: weights expect {n.weights.shape[2]} input channels, got {x.c}")
        oh, ow = spec.out_hw(x.h, x.w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"node {n.id}: non-positive output size {oh}x{ow}")
        return TensorShape(oh, ow, n.weights.shape[3])
    if k is OpKind.DEPTHWISE:
        spec = _conv_kernel(n)
        if n.weights.shape[3] != 1:
            raise ShapeError(f"node {n.id}: depthwise channel multiplier must be 1, got {n.weights.shape[3]}")
        if n.weights.shape[2] != x.c:
            raise ShapeError(f"node {n.id}: depthwise weights have {n.weights.shape[2]} channels, input has {x.c}")
        oh, ow = spec.out_hw(x.h, x.w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"node {n.id}: non-positive output size {oh}x{ow}")
        return TensorShape(oh, ow, x.c)
    if k is OpKind.MATMUL:
        if (x.h, x.w) != (1, 1):
            raise ShapeError(f"node {n.id}: MatMul needs a 1x1xC vector input, got {x.as_tuple()}")
        if n.weights.shape[:3] != (1, 1, x.c):
            raise ShapeError(f"node {n.id}: MatMul weights {n.weights.shape} do not match input channels {x.c}")
        return TensorShape(1, 1, n.weights.shape[3])
    if k is OpKind.MAXPOOL:
        spec = node_kernel(n)
        oh, ow = spec.out_hw(x.h, x.w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"node {n.id}: non-positive output size {oh}x{ow}")
        return TensorShape(oh, ow, x.c)
    if k is OpKind.MEAN:
        return TensorShape(1, 1, x.c)
    if k is OpKind.ADD:
        if ins[0] != ins[1]:
            raise ShapeError(f"node {n.id}: Add input shapes differ: {ins[0].as_tuple()} vs {ins[1].as_tuple()}")
        return x
    if k is OpKind.PAD:
        t, b, l, r = n.pad
        return TensorShape(x.h + t + b, x.w + l + r, x.c)
    vec = {OpKind.BIAS_ADD: n.bias, OpKind.SCALE: n.scale, OpKind.SHIFT: n.shift}.get(k)
    if vec is not None and len(vec) != x.c:
        raise ShapeError(f"node {n.id}: per-channel vector has {len(vec)} entries, input has {x.c} channels")
    if k is OpKind.BATCHNORM and n.bn.channels != x.c:
        raise ShapeError(f"node {n.id}: BatchNorm has {n.bn.channels} channels, input has {x.c}")
    return x


def infer_shapes(g: Graph) -> Graph:
    """Return a copy of ``g`` with every node's ``out_shape`` filled in."""
    shapes: dict[str, TensorShape] = {}
    for nid in topo_order(g):
        n = g.nodes[nid]
        shapes[nid] = _infer(n, [shapes[i] for i in n.inputs])
    return g.with_nodes(g.nodes[k].replace(out_shape=shapes[k]) for k in g.nodes)


def normalize_matmul(g: Graph) -> Graph:
    """Rewrite every MatMul as an equivalent 1x1 stride-1 unpadded Conv2D."""
    if not any(n.kind is OpKind.MATMUL for n in g):
        return g
    g = infer_shapes(g)
    nodes = []
    for n in g:
        if n.kind is OpKind.MATMUL:
            ci, co = n.weights.shape[2], n.weights.shape[3]
            nodes.append(n.replace(kind=OpKind.CONV2D, kernel=KernelSpec(1, 1),
                                   weights=np.asarray(n.weights).reshape(1, 1, ci, co)))
        else:
            nodes.append(n)
    return infer_shapes(g.with_nodes(nodes))


# ---------------------------------------------------------------------------
# on-disk format: JSON document plus raw float32 blobs in blobs/


BLOB_DIR = "blobs"
_HEADER = struct.Struct("<4I")


def write_blob(path: Path, a: np.ndarray) -> None:
    a = np.asarray(a, dtype="<f4")
    dims = a.shape if a.ndim == 4 else (1, 1, 1, a.size) if a.ndim <= 1 else (1, 1) + a.shape
    if len(dims) != 4:
        raise ValueError(f"cannot store array of rank {a.ndim} as a blob")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(*dims))
        f.write(np.ascontiguousarray(a).tobytes())


def read_blob(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise GraphFormatError(f"blob {path} is truncated")
    dims = _HEADER.unpack_from(raw)
    count = int(np.prod(dims))
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * count:
        raise GraphFormatError(f"blob {path}: header says {dims} but payload holds {len(payload) // 4} floats")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def _blob_stem(node_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", node_id)


def save_graph(g: Graph, path) -> Path:
    """Write ``g`` as ``path`` (JSON) plus a sibling ``blobs/`` directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_dir = path.parent / BLOB_DIR
    blob_dir.mkdir(exist_ok=True)
    used: set[str] = set()

    def blob(node_id: str, tag: str, a: np.ndarray) -> str:
        name = f"{_blob_stem(node_id)}.{tag}.bin"
        k = 1
        while name in used:
            name = f"{_blob_stem(node_id)}_{k}.{tag}.bin"
            k += 1
        used.add(name)
        write_blob(blob_dir / name, a)
        return name

    docs = []
    for n in g:
        d: dict = {"id": n.id, "kind": n.kind.value, "inputs": list(n.inputs),
                   "precision": n.precision.to_json()}
        if n.weight_precision is not None:
            d["weight_precision"] = n.weight_precision.to_json()
        if n.kernel is not None:
            d["kernel"] = n.kernel.to_json()
        if n.weights is not None:
            d["weights"] = blob(n.id, "weights", n.weights)
        for tag in ("bias", "scale", "shift"):
            if getattr(n, tag) is not None:
                d[tag] = blob(n.id, tag, getattr(n, tag))
        if n.bn is not None:
            d["bn"] = blob(n.id, "bn", np.stack([n.bn.gamma, n.bn.beta, n.bn.mean, n.bn.var]))
            d["eps"] = n.bn.eps
        if n.pad is not None:
            d["pad"] = list(n.pad)
        if n.clip is not None:
            d["clip"] = n.clip
        if n.shape is not None:
            d["shape"] = list(n.shape.as_tuple())
        docs.append(d)
    path.write_text(json.dumps({"nodes": docs, "outputs": list(g.outputs)}, indent=1) + "\n")
    return path


def _vector(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1)


def load_graph(path) -> Graph:
    """Load and validate a graph written by :func:`save_graph`."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        raw_nodes = doc["nodes"]
        outputs = doc["outputs"]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise GraphFormatError(f"cannot parse graph file {path}: {e}") from e
    blob_dir = path.parent / BLOB_DIR

    def blob(name: str) -> np.ndarray:
        p = blob_dir / name
        if not p.exists():
            raise GraphFormatError(f"missing blob {name}")
        return read_blob(p)

    nodes: dict[str, Node] = {}
    for d in raw_nodes:
        try:
            nid = d["id"]
            kind_name = d["kind"]
        except (KeyError, TypeError) as e:
            raise GraphFormatError(f"malformed node entry {d!r}") from e
        try:
            kind = OpKind(kind_name)
        except ValueError:
            raise GraphError(f"node {nid}: unknown op kind {kind_name!r}") from None
        if nid in nodes:
            raise GraphError(f"duplicate node id {nid}")
        kw: dict = {"id": nid, "kind": kind, "inputs": tuple(d.get("inputs", ()))}
        if "precision" in d:
            kw["precision"] = FixedPointFormat.from_json(d["precision"])
        if "weight_precision" in d:
            kw["weight_precision"] = FixedPointFormat.from_json(d["weight_precision"])
        if "kernel" in d:
            kw["kernel"] = KernelSpec.from_json(d["kernel"])
        if "weights" in d:
            kw["weights"] = blob(d["weights"])
        for tag in ("bias", "scale", "shift"):
            if tag in d:
                kw[tag] = _vector(blob(d[tag]))
        if "bn" in d:
            bn = blob(d["bn"]).reshape(4, -1)
            kw["bn"] = BNParams(bn[0], bn[1], bn[2], bn[3], eps=float(d.get("eps", 1e-3)))
        if "pad" in d:
            kw["pad"] = tuple(d["pad"])
        if "clip" in d:
            kw["clip"] = float(d["clip"])
        if "shape" in d:
            kw["shape"] = TensorShape(*d["shape"])
        nodes[nid] = Node(**kw)
    return validate(Graph(nodes, tuple(outputs)))


def apply_precisions(g: Graph, annotations: dict) -> Graph:
    """Attach per-node fixed-point formats from a ``{node_id: {...}}`` mapping.

    Each entry may carry ``bits``/``frac`` for activations and optionally
    ``weight_bits``/``weight_frac``. Unlisted nodes keep their current format.
    """
    unknown = set(annotations) - set(g.nodes)
    if unknown:
        raise GraphError(f"precision annotations name unknown nodes: {sorted(unknown)}")
    nodes = []
    for n in g:
        a = annotations.get(n.id)
        if a is None:
            nodes.append(n)
            continue
        changes = {"precision": FixedPointFormat(int(a.get("bits", n.precision.bits)),
                                                 int(a.get("frac", n.precision.frac)))}
        if "weight_bits" in a or "weight_frac" in a:
            changes["weight_precision"] = FixedPointFormat(int(a.get("weight_bits", 16)),
                                                           int(a.get("weight_frac", 8)))
        nodes.append(n.replace(**changes))
    return g.with_nodes(nodes)
