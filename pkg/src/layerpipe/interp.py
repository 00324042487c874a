"""Reference interpreter in float and per-node fixed-point arithmetic.

Fixed mode keeps every intermediate as an exact ``int64`` and quantizes once,
at each node's output, to that node's :class:`FixedPointFormat`. Convolutions
are cross-correlations (no kernel flip).
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from .graph import FixedPointFormat, Graph, KernelSpec, Node, OpKind, node_kernel, topo_order


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, fmt: FixedPointFormat) -> np.ndarray:
    """Saturating round-half-away-from-zero conversion to integer codes."""
    scaled = np.asarray(x, dtype=np.float64) * (2.0 ** fmt.frac)
    return np.clip(round_half_away(scaled), fmt.min_int, fmt.max_int).astype(np.int64)


def dequantize(q, fmt: FixedPointFormat) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * (2.0 ** -fmt.frac)


def requantize(acc, frac_in: int, fmt: FixedPointFormat) -> np.ndarray:
    """Exactly rescale integers carrying ``frac_in`` fraction bits into ``fmt``."""
    acc = np.asarray(acc, dtype=np.int64)
    shift = frac_in - fmt.frac
    if shift > 0:
        half = np.int64(1) << np.int64(shift - 1)
        mag = (np.abs(acc) + half) >> np.int64(shift)
        out = np.where(acc < 0, -mag, mag)
    else:
        out = np.clip(acc, fmt.min_int, fmt.max_int) << np.int64(-shift)
    return np.clip(out, fmt.min_int, fmt.max_int).astype(np.int64)


def _div_round_half_away(num: np.ndarray, den: int) -> np.ndarray:
    mag = (2 * np.abs(num) + den) // (2 * den)
    return np.where(num < 0, -mag, mag)


# ---------------------------------------------------------------------------
# kernels shared by both modes; dtype follows the inputs


def _pad(x: np.ndarray, spec: KernelSpec, value) -> np.ndarray:
    return np.pad(x, ((spec.pt, spec.pb), (spec.pl, spec.pr), (0, 0)), constant_values=value)


def _windows(xp: np.ndarray, spec: KernelSpec, oh: int, ow: int):
    for ky in range(spec.kh):
        for kx in range(spec.kw):
            yield ky, kx, xp[ky:ky + spec.sh * (oh - 1) + 1:spec.sh, kx:kx + spec.sw * (ow - 1) + 1:spec.sw, :]


def _acc_dtype(x, w):
    return np.int64 if (np.issubdtype(x.dtype, np.integer) and np.issubdtype(w.dtype, np.integer)) else np.float64


def conv2d_ref(x: np.ndarray, w: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Direct convolution of an ``(H, W, ci)`` tensor with ``(kh, kw, ci, co)`` weights."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[2] != x.shape[2] or w.shape[:2] != (spec.kh, spec.kw):
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weights {w.shape}, kernel {spec.kh}x{spec.kw}")
    dt = _acc_dtype(x, w)
    oh, ow = spec.out_hw(x.shape[0], x.shape[1])
    xp = _pad(x.astype(dt), spec, 0)
    w = w.astype(dt)
    out = np.zeros((oh, ow, w.shape[3]), dtype=dt)
    for ky, kx, patch in _windows(xp, spec, oh, ow):
        out += patch @ w[ky, kx]
    return out


def depthwise_conv2d_ref(x: np.ndarray, w: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Per-channel convolution; weights are ``(kh, kw, C, 1)``."""
    if w.ndim != 4 or w.shape[3] != 1:
        raise ValueError(f"depthwise channel multiplier must be 1, weights have shape {w.shape}")
    if x.shape[2] != w.shape[2] or w.shape[:2] != (spec.kh, spec.kw):
        raise ValueError(f"depthwise shape mismatch: input {x.shape}, weights {w.shape}")
    dt = _acc_dtype(x, w)
    oh, ow = spec.out_hw(x.shape[0], x.shape[1])
    xp = _pad(x.astype(dt), spec, 0)
    w = w.astype(dt)
    out = np.zeros((oh, ow, x.shape[2]), dtype=dt)
    for ky, kx, patch in _windows(xp, spec, oh, ow):
        out += patch * w[ky, kx, :, 0]
    return out


def maxpool_ref(x: np.ndarray, spec: KernelSpec, pad_value) -> np.ndarray:
    oh, ow = spec.out_hw(x.shape[0], x.shape[1])
    xp = _pad(x, spec, pad_value)
    out = None
    for _, _, patch in _windows(xp, spec, oh, ow):
        out = patch.copy() if out is None else np.maximum(out, patch)
    return out


# ---------------------------------------------------------------------------
# fixed-point node arithmetic (also used by the pipeline simulator on lines)


def fixed_bias_add(xq, in_fmt: FixedPointFormat, bq, b_fmt: FixedPointFormat, out_fmt: FixedPointFormat):
    f = max(in_fmt.frac, b_fmt.frac)
    acc = (np.asarray(xq, np.int64) << (f - in_fmt.frac)) + (np.asarray(bq, np.int64) << (f - b_fmt.frac))
    return requantize(acc, f, out_fmt)


def fixed_add(aq, a_fmt: FixedPointFormat, bq, b_fmt: FixedPointFormat, out_fmt: FixedPointFormat):
    return fixed_bias_add(aq, a_fmt, bq, b_fmt, out_fmt)


def fixed_relu(xq, in_fmt: FixedPointFormat, out_fmt: FixedPointFormat, clip=None):
    y = np.maximum(np.asarray(xq, np.int64), 0)
    if clip is not None:
        y = np.minimum(y, int(round_half_away(clip * 2.0 ** in_fmt.frac)))
    return requantize(y, in_fmt.frac, out_fmt)


def fixed_mean(sum_q, count: int, in_fmt: FixedPointFormat, out_fmt: FixedPointFormat):
    """Round ``sum / count`` (sum in ``in_fmt`` units) into ``out_fmt`` exactly."""
    d = out_fmt.frac - in_fmt.frac
    num = np.asarray(sum_q, np.int64) << max(d, 0)
    den = count << max(-d, 0)
    return np.clip(_div_round_half_away(num, den), out_fmt.min_int, out_fmt.max_int).astype(np.int64)


def fixed_conv_output(acc, in_fmt: FixedPointFormat, w_fmt: FixedPointFormat, out_fmt: FixedPointFormat):
    return requantize(acc, in_fmt.frac + w_fmt.frac, out_fmt)


def quantized_weights(n: Node) -> np.ndarray:
    return quantize(n.weights, n.wformat)


def quantized_bias(n: Node) -> np.ndarray:
    return quantize(n.bias, n.wformat)


# ---------------------------------------------------------------------------
# graph evaluation


def bn_affine(n: Node) -> tuple[np.ndarray, np.ndarray]:
    bn = n.bn
    s = bn.gamma.astype(np.float64) / np.sqrt(bn.var.astype(np.float64) + bn.eps)
    return s, bn.beta - bn.mean * s


def _eval_float(n: Node, ins: list[np.ndarray]) -> np.ndarray:
    k = n.kind
    x = ins[0] if ins else None
    if k in (OpKind.CONV2D, OpKind.MATMUL):
        return conv2d_ref(x, n.weights.astype(np.float64), node_kernel(n))
    if k is OpKind.DEPTHWISE:
        return depthwise_conv2d_ref(x, n.weights.astype(np.float64), node_kernel(n))
    if k is OpKind.BIAS_ADD:
        return x + n.bias
    if k is OpKind.RELU:
        return np.maximum(x, 0.0)
    if k is OpKind.RELU6:
        return np.clip(x, 0.0, n.clip)
    if k is OpKind.MAXPOOL:
        return maxpool_ref(x, n.kernel, -np.inf)
    if k is OpKind.ADD:
        return ins[0] + ins[1]
    if k is OpKind.MEAN:
        return x.mean(axis=(0, 1), keepdims=True)
    if k is OpKind.BATCHNORM:
        s, t = bn_affine(n)
        return x * s + t
    if k is OpKind.SCALE:
        return x * n.scale
    if k is OpKind.SHIFT:
        return x + n.shift
    if k is OpKind.PAD:
        t, b, l, r = n.pad
        return np.pad(x, ((t, b), (l, r), (0, 0)))
    raise ValueError(f"cannot evaluate {k.value}")


def _eval_fixed(n: Node, ins: list[tuple[np.ndarray, FixedPointFormat]]) -> np.ndarray:
    k = n.kind
    out = n.precision
    if k in (OpKind.CONV2D, OpKind.MATMUL, OpKind.DEPTHWISE):
        xq, f = ins[0]
        ref = depthwise_conv2d_ref if k is OpKind.DEPTHWISE else conv2d_ref
        acc = ref(xq, quantized_weights(n), node_kernel(n))
        return fixed_conv_output(acc, f, n.wformat, out)
    if k is OpKind.BIAS_ADD:
        xq, f = ins[0]
        return fixed_bias_add(xq, f, quantized_bias(n), n.wformat, out)
    if k in (OpKind.RELU, OpKind.RELU6):
        xq, f = ins[0]
        return fixed_relu(xq, f, out, n.clip if k is OpKind.RELU6 else None)
    if k is OpKind.MAXPOOL:
        xq, f = ins[0]
        return requantize(maxpool_ref(xq, n.kernel, f.min_int), f.frac, out)
    if k is OpKind.ADD:
        (aq, af), (bq, bf) = ins
        return fixed_add(aq, af, bq, bf, out)
    if k is OpKind.MEAN:
        xq, f = ins[0]
        return fixed_mean(xq.sum(axis=(0, 1), keepdims=True), xq.shape[0] * xq.shape[1], f, out)
    if k is OpKind.PAD:
        xq, f = ins[0]
        t, b, l, r = n.pad
        return requantize(np.pad(xq, ((t, b), (l, r), (0, 0))), f.frac, out)
    # BatchNorm and the affine constants never reach hardware; evaluate them
    # on the dequantized value and quantize the result.
    xq, f = ins[0]
    return quantize(_eval_float(n, [dequantize(xq, f)]), out)


def eval_graph(g: Graph, x: np.ndarray, mode: Literal["float", "fixed"] = "float",
               return_all: bool = False) -> dict[str, np.ndarray]:
    """Evaluate ``g`` on input tensor ``x``.

    Returns ``{output_id: tensor}``; fixed mode returns integer codes in each
    output node's format. ``return_all`` includes every node.
    """
    if mode not in ("float", "fixed"):
        raise ValueError(f"unknown mode {mode!r}")
    values: dict[str, np.ndarray] = {}
    for nid in topo_order(g):
        n = g.nodes[nid]
        if n.kind is OpKind.PLACEHOLDER:
            x = np.asarray(x, dtype=np.float64)
            if n.shape is not None and x.shape != n.shape.as_tuple():
                raise ValueError(f"input shape {x.shape} does not match placeholder {n.shape.as_tuple()}")
            values[nid] = quantize(x, n.precision) if mode == "fixed" else x
        elif mode == "float":
            values[nid] = _eval_float(n, [values[i] for i in n.inputs])
        else:
            values[nid] = _eval_fixed(n, [(values[i], g.nodes[i].precision) for i in n.inputs])
    keep = values if return_all else {o: values[o] for o in g.outputs}
    return dict(keep)


def max_relative_error(a: np.ndarray, ref: np.ndarray) -> float:
    """``max|a - ref| / max|ref|`` (absolute error when ``ref`` is all zero)."""
    a = np.asarray(a, np.float64)
    ref = np.asarray(ref, np.float64)
    scale = float(np.max(np.abs(ref))) if ref.size else 0.0
    err = float(np.max(np.abs(a - ref))) if ref.size else 0.0
    return err / scale if scale > 0 else err
