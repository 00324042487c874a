"""Magnitude pruning and the compressed (weight, runlength, x-index) weight stream.

A convolution with ``S`` channel splits gets one stream per split. Within a
split, the nonzero weights of output channel ``o`` are visited in ascending
linear position ``p = y * n + (z - start)`` (``n`` = split width) and stored as
``(weight, p - p_prev, x)`` with ``p_prev = -1`` at the start of every output
channel. Gaps wider than the runlength field are bridged by zero-weight
fillers, and every split is padded with ``(0, 0, 0)`` entries so all splits
spend the same number of entries on each output channel.

Depthwise layers split their channels into ``S`` lanes; group ``g`` of lane
``s`` is channel ``lane_s.start + g`` and positions are just the kernel row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graph import DEFAULT_FORMAT, FixedPointFormat
from .interp import dequantize, quantize


class StreamDecodeError(ValueError):
    """A runlength walked outside its split, or a stream is malformed."""


class FieldOverflowError(ValueError):
    pass


def prune_magnitude(w: np.ndarray, rate: float) -> np.ndarray:
    """Zero exactly ``floor(rate * N)`` smallest-magnitude weights (ties: lowest index)."""
    if not 0 <= rate < 1:
        raise ValueError(f"pruning rate must be in [0, 1), got {rate}")
    w = np.asarray(w)
    flat = w.reshape(-1).copy()
    k = int(math.floor(rate * flat.size))
    if k:
        order = np.argsort(np.abs(flat), kind="stable")
        flat[order[:k]] = 0
    return flat.reshape(w.shape)


def partition_channels(c: int, S: int) -> list[range]:
    """Split ``range(c)`` into ``S`` contiguous ranges, larger ones first."""
    if not 1 <= S <= c:
        raise ValueError(f"need 1 <= S <= {c} channel splits, got {S}")
    q, r = divmod(c, S)
    out, start = [], 0
    for s in range(S):
        size = q + (1 if s < r else 0)
        out.append(range(start, start + size))
        start += size
    return out


def default_x_bits(kw: int) -> int:
    return max(0, math.ceil(math.log2(kw))) if kw > 1 else 0


@dataclass
class SparseStream:
    """Entries of one channel split, output-channel groups concatenated in order."""

    split_index: int
    start: int
    stop: int
    weight: np.ndarray
    runlength: np.ndarray
    x_index: np.ndarray
    raw_lengths: np.ndarray  # per-oc entries before alignment

    def __len__(self) -> int:
        return len(self.weight)

    @property
    def width(self) -> int:
        return self.stop - self.start

    def entries(self, counts: np.ndarray, o: int) -> list[tuple[int, int, int]]:
        """The aligned entries of output channel (or group) ``o``."""
        lo = int(np.sum(counts[:o]))
        hi = lo + int(counts[o])
        return list(zip(self.weight[lo:hi].tolist(), self.runlength[lo:hi].tolist(), self.x_index[lo:hi].tolist()))


@dataclass
class EncodedLayer:
    kh: int
    kw: int
    c_in: int
    c_out: int
    S: int
    rl_bits: int
    weight_format: FixedPointFormat
    depthwise: bool
    streams: list[SparseStream]
    counts: np.ndarray  # aligned entries per output channel (or depthwise group)
    x_bits: Optional[int] = None

    def __post_init__(self):
        if self.x_bits is None:
            self.x_bits = default_x_bits(self.kw)

    @property
    def partition(self) -> list[range]:
        return [range(s.start, s.stop) for s in self.streams]

    @property
    def entries_per_line(self) -> int:
        return int(self.counts.sum())


# ---------------------------------------------------------------------------
# encoding


def _runlength_entries(oc: np.ndarray, pos: np.ndarray, x: np.ndarray, w: np.ndarray,
                       n_groups: int, max_rl: int):
    """Turn sorted nonzero (oc, pos, x, w) into stream entries with fillers."""
    prev = np.empty_like(pos)
    if len(pos):
        prev[0] = -1
        prev[1:] = np.where(oc[1:] == oc[:-1], pos[:-1], -1)
    gap = pos - prev
    fill = np.maximum(0, (gap - 1) // max_rl)
    reps = fill + 1
    src = np.repeat(np.arange(len(pos)), reps)
    first = np.cumsum(reps) - reps
    k = np.arange(len(src)) - first[src]
    is_fill = k < fill[src]
    ew = np.where(is_fill, 0, w[src])
    erl = np.where(is_fill, max_rl, gap[src] - fill[src] * max_rl)
    ex = np.where(is_fill, 0, x[src])
    eo = oc[src]
    lengths = np.bincount(eo, minlength=n_groups).astype(np.int64)
    return eo, ew, erl, ex, lengths


def _split_nonzeros(wq: np.ndarray, rng: range, depthwise: bool):
    """Nonzeros of one split as (group, position, x, weight), sorted by stream order."""
    kh, kw = wq.shape[:2]
    if depthwise:
        sub = wq[:, :, rng.start:rng.stop, 0]  # (kh, kw, lane)
        y, x, g = np.nonzero(sub)
        w = sub[y, x, g]
        pos = y
        order = np.lexsort((x, pos, g))
        return g[order], pos[order], x[order], w[order]
    sub = wq[:, :, rng.start:rng.stop, :]
    y, x, z, o = np.nonzero(sub)
    w = sub[y, x, z, o]
    pos = y * len(rng) + z
    order = np.lexsort((x, pos, o))
    return o[order], pos[order], x[order], w[order]


def _check_args(wq: np.ndarray, S: int, rl_bits: int, depthwise: bool):
    if rl_bits < 1:
        raise ValueError(f"runlength field needs at least 1 bit, got {rl_bits}")
    if wq.ndim != 4:
        raise ValueError(f"weights must be 4-D (kh, kw, ci, co), got shape {wq.shape}")
    if depthwise and wq.shape[3] != 1:
        raise ValueError("depthwise weights must have a channel multiplier of 1")
    c = wq.shape[2]
    if not 1 <= S <= c:
        raise ValueError(f"need 1 <= S <= {c} channel splits, got {S}")


def encode_layer(w: np.ndarray, S: int, rl_bits: int = 8, weight_format: FixedPointFormat = DEFAULT_FORMAT,
                 depthwise: bool = False, quantized: bool = False, x_bits: Optional[int] = None) -> EncodedLayer:
    """Encode a (pruned) kernel into ``S`` aligned sparse streams.

    ``w`` holds real weights that are quantized with ``weight_format`` unless
    ``quantized`` says they already are integer codes.
    """
    wq = np.asarray(w, dtype=np.int64) if quantized else quantize(w, weight_format)
    _check_args(wq, S, rl_bits, depthwise)
    kh, kw, ci, co = wq.shape
    max_rl = (1 << rl_bits) - 1
    parts = partition_channels(ci, S)
    n_groups = parts[0].stop - parts[0].start if depthwise else co
    raw = []
    for rng in parts:
        g, pos, x, wv = _split_nonzeros(wq, rng, depthwise)
        raw.append(_runlength_entries(g, pos, x, wv, n_groups, max_rl))
    counts = np.max([r[4] for r in raw], axis=0)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    streams = []
    for s, (rng, (eo, ew, erl, ex, lengths)) in enumerate(zip(parts, raw)):
        first = np.concatenate([[0], np.cumsum(lengths)])[:-1]
        dest = offsets[eo] + (np.arange(len(eo)) - first[eo])
        sw, srl, sx = (np.zeros(total, np.int64) for _ in range(3))
        sw[dest], srl[dest], sx[dest] = ew, erl, ex
        streams.append(SparseStream(s, rng.start, rng.stop, sw, srl, sx, lengths))
    return EncodedLayer(kh, kw, ci, 1 if depthwise else co, S, rl_bits, weight_format, depthwise,
                        streams, counts.astype(np.int64), x_bits)


def entry_counts(wq: np.ndarray, S: int, rl_bits: int = 8, depthwise: bool = False) -> np.ndarray:
    """Aligned per-output-channel entry counts, without building the streams."""
    wq = np.asarray(wq)
    _check_args(wq, S, rl_bits, depthwise)
    kh, kw, ci, co = wq.shape
    parts = partition_channels(ci, S)
    max_rl = (1 << rl_bits) - 1
    if not depthwise and kh * len(parts[0]) <= max_rl:
        # no gap can exceed the field, so lengths are plain nonzero counts
        nz = np.count_nonzero(wq, axis=(0, 1))  # (ci, co)
        csum = np.vstack([np.zeros((1, co), np.int64), np.cumsum(nz, axis=0)])
        bounds = np.array([p.start for p in parts] + [ci])
        per_split = csum[bounds[1:]] - csum[bounds[:-1]]
        return per_split.max(axis=0).astype(np.int64)
    n_groups = len(parts[0]) if depthwise else co
    lengths = [_runlength_entries(*_split_nonzeros(wq, rng, depthwise), n_groups, max_rl)[4] for rng in parts]
    return np.max(lengths, axis=0).astype(np.int64)


class CountCache:
    """Memoized :func:`entry_counts` for one kernel at varying ``S``."""

    def __init__(self, wq: np.ndarray, rl_bits: int = 8, depthwise: bool = False):
        self.wq = np.asarray(wq, dtype=np.int64)
        self.rl_bits = rl_bits
        self.depthwise = depthwise
        self._cache: dict[int, int] = {}

    @property
    def max_splits(self) -> int:
        return self.wq.shape[2]

    def entries(self, S: int) -> int:
        if S not in self._cache:
            self._cache[S] = int(entry_counts(self.wq, S, self.rl_bits, self.depthwise).sum())
        return self._cache[S]


# ---------------------------------------------------------------------------
# decoding


def stream_addresses(layer: EncodedLayer, s: int):
    """Walk split ``s``'s runlengths; returns per-entry (group, y, z, x, weight).

    ``z`` is the absolute input channel. Raises StreamDecodeError when an
    address leaves the split.
    """
    st = layer.streams[s]
    counts = layer.counts
    n = len(st.weight)
    if n != int(counts.sum()):
        raise StreamDecodeError(f"split {s}: stream has {n} entries, counts sum to {int(counts.sum())}")
    group = np.repeat(np.arange(len(counts)), counts)
    if np.any(st.runlength < 0):
        raise StreamDecodeError(f"split {s}: negative runlength")
    csum = np.cumsum(st.runlength)
    base = np.concatenate([[0], np.cumsum(counts)])[:-1]
    before = np.concatenate([[0], csum])[base]  # cumulative runlength before each group
    pos = csum - before[group] - 1
    width = st.width
    extent = layer.kh if layer.depthwise else layer.kh * width
    bad = (pos >= extent) | ((pos < 0) & (st.weight != 0))
    if np.any(bad):
        i = int(np.argmax(bad))
        raise StreamDecodeError(f"split {s}: runlength walks past the split extent at entry {i} "
                                f"(group {int(group[i])}, position {int(pos[i])} >= {extent})")
    if np.any(st.x_index >= layer.kw) or np.any(st.x_index < 0):
        raise StreamDecodeError(f"split {s}: x index out of range for kernel width {layer.kw}")
    pos = np.maximum(pos, 0)
    if layer.depthwise:
        y = pos
        z = st.start + group
        if np.any((z >= st.stop) & (st.weight != 0)):
            raise StreamDecodeError(f"split {s}: weight for a channel outside lane {st.start}..{st.stop}")
        z = np.minimum(z, st.stop - 1)
    else:
        y, zz = np.divmod(pos, width)
        z = st.start + zz
    return group, y, z, st.x_index, st.weight


def decode_layer(layer: EncodedLayer) -> np.ndarray:
    """Rebuild the dense integer-coded kernel from the streams."""
    if layer.depthwise:
        out = np.zeros((layer.kh, layer.kw, layer.c_in, 1), np.int64)
    else:
        out = np.zeros((layer.kh, layer.kw, layer.c_in, layer.c_out), np.int64)
    for s in range(layer.S):
        g, y, z, x, w = stream_addresses(layer, s)
        nz = w != 0
        if layer.depthwise:
            out[y[nz], x[nz], z[nz], 0] = w[nz]
        else:
            out[y[nz], x[nz], z[nz], g[nz]] = w[nz]
    return out


def decode_layer_real(layer: EncodedLayer) -> np.ndarray:
    return dequantize(decode_layer(layer), layer.weight_format)


# ---------------------------------------------------------------------------
# memory-initialization files


def _hex_width(total_bits: int) -> int:
    return max(1, math.ceil(total_bits / 4))


def emit_meminit(stream: SparseStream, rl_bits: int, x_bits: int, weight_bits: int) -> list[str]:
    """Pack each entry as ``x << (rl+wb) | rl << wb | w`` in fixed-width uppercase hex."""
    w = np.asarray(stream.weight, np.int64)
    rl = np.asarray(stream.runlength, np.int64)
    x = np.asarray(stream.x_index, np.int64)
    lo, hi = -(1 << (weight_bits - 1)), (1 << (weight_bits - 1)) - 1
    if np.any((w < lo) | (w > hi)):
        raise FieldOverflowError(f"weight does not fit in {weight_bits} bits")
    if np.any((rl < 0) | (rl >= (1 << rl_bits))):
        raise FieldOverflowError(f"runlength does not fit in {rl_bits} bits")
    if np.any((x < 0) | (x >= (1 << x_bits))):
        raise FieldOverflowError(f"x index does not fit in {x_bits} bits")
    width = _hex_width(x_bits + rl_bits + weight_bits)
    words = (x << (rl_bits + weight_bits)) | (rl << weight_bits) | (w & ((1 << weight_bits) - 1))
    return [f"{int(v):0{width}X}" for v in words]


def parse_meminit(lines: Sequence[str], rl_bits: int, x_bits: int, weight_bits: int):
    """Inverse of :func:`emit_meminit`; returns (weight, runlength, x_index)."""
    width = _hex_width(x_bits + rl_bits + weight_bits)
    vals = []
    for i, line in enumerate(lines):
        line = line.strip()
        if len(line) != width:
            raise StreamDecodeError(f"line {i + 1}: expected {width} hex digits, got {line!r}")
        try:
            vals.append(int(line, 16))
        except ValueError:
            raise StreamDecodeError(f"line {i + 1}: not a hex word: {line!r}") from None
    words = np.array(vals, dtype=np.int64)
    if np.any(words >> (x_bits + rl_bits + weight_bits)):
        raise StreamDecodeError("word has bits set above the packed fields")
    w = words & ((1 << weight_bits) - 1)
    w = np.where(w >= (1 << (weight_bits - 1)), w - (1 << weight_bits), w)
    rl = (words >> weight_bits) & ((1 << rl_bits) - 1)
    x = words >> (rl_bits + weight_bits)
    return w.astype(np.int64), rl.astype(np.int64), x.astype(np.int64)


def meminit_name(node_id: str, k: int) -> str:
    return f"{node_id}_split{k}.hex"


def counts_name(node_id: str) -> str:
    return f"{node_id}_oc_counts.txt"


def write_layer_files(layer: EncodedLayer, node_id: str, directory) -> list[str]:
    """Write one hex file per split plus the counts file; returns the file names."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    wb = layer.weight_format.bits
    for st in layer.streams:
        name = meminit_name(node_id, st.split_index)
        lines = emit_meminit(st, layer.rl_bits, layer.x_bits, wb)
        (d / name).write_text("".join(line + "\n" for line in lines))
        names.append(name)
    cname = counts_name(node_id)
    (d / cname).write_text("".join(f"{int(c)}\n" for c in layer.counts))
    names.append(cname)
    return names


def read_counts(path) -> np.ndarray:
    text = Path(path).read_text().split()
    try:
        return np.array([int(t) for t in text], dtype=np.int64)
    except ValueError as e:
        raise StreamDecodeError(f"{path}: bad count entry: {e}") from None


def read_layer_files(directory, node_id: str, *, kh: int, kw: int, c_in: int, c_out: int, S: int,
                     rl_bits: int, x_bits: int, weight_format: FixedPointFormat, depthwise: bool) -> EncodedLayer:
    """Reconstruct an EncodedLayer from emitted files plus its layer geometry."""
    d = Path(directory)
    counts = read_counts(d / counts_name(node_id))
    parts = partition_channels(c_in, S)
    streams = []
    for s, rng in enumerate(parts):
        path = d / meminit_name(node_id, s)
        w, rl, x = parse_meminit(path.read_text().splitlines(), rl_bits, x_bits, weight_format.bits)
        if len(w) != int(counts.sum()):
            raise StreamDecodeError(f"{path.name}: {len(w)} entries but counts sum to {int(counts.sum())}")
        streams.append(SparseStream(s, rng.start, rng.stop, w, rl, x, counts.copy()))
    layer = EncodedLayer(kh, kw, c_in, c_out, S, rl_bits, weight_format, depthwise, streams, counts, x_bits)
    for s in range(S):
        stream_addresses(layer, s)
    return layer
