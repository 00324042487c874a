import numpy as np
import pytest
from hypothesis import given, strategies as st

from layerpipe.graph import FixedPointFormat
from layerpipe.interp import quantize
from layerpipe.sparsity import (
    CountCache,
    EncodedLayer,
    FieldOverflowError,
    SparseStream,
    StreamDecodeError,
    decode_layer,
    emit_meminit,
    encode_layer,
    entry_counts,
    parse_meminit,
    partition_channels,
    prune_magnitude,
    read_layer_files,
    stream_addresses,
    write_layer_files,
)

Q88 = FixedPointFormat(16, 8)


def _kernel(values):
    return np.asarray(values, float).reshape(1, 1, -1, 1)


def _entries(layer, s=0):
    st_ = layer.streams[s]
    return list(zip(st_.weight.tolist(), st_.runlength.tolist(), st_.x_index.tolist()))


# ---------------------------------------------------------------------------
# pruning


def test_prune_rate_zero_is_identity(rng):
    w = rng.normal(size=(3, 3, 2, 2))
    np.testing.assert_array_equal(prune_magnitude(w, 0.0), w)


def test_prune_smallest_magnitudes():
    np.testing.assert_array_equal(prune_magnitude(np.array([0.1, -0.5, 0.3, -0.2]), 0.5), [0, -0.5, 0.3, 0])


def test_prune_exact_count(rng):
    assert np.count_nonzero(prune_magnitude(rng.normal(size=1000), 0.85) == 0) == 850


def test_prune_ties_lowest_index_first():
    np.testing.assert_array_equal(prune_magnitude(np.array([1.0, -1.0, 1.0, 2.0]), 0.5), [0, 0, 1.0, 2.0])


@pytest.mark.parametrize("rate", [-0.1, 1.0])
def test_prune_rejects_bad_rate(rate):
    with pytest.raises(ValueError):
        prune_magnitude(np.ones(4), rate)


@given(st.integers(0, 10_000), st.floats(0, 0.99))
def test_prune_properties(seed, rate):
    w = np.random.default_rng(seed).normal(size=(3, 3, 4, 2))
    out = prune_magnitude(w, rate)
    assert np.all(np.abs(out) <= np.abs(w))
    assert np.all((out == 0) | (out == w))
    assert np.count_nonzero(out == 0) == int(np.floor(rate * w.size))


# ---------------------------------------------------------------------------
# partitioning


def test_partition_even():
    assert partition_channels(8, 4) == [range(0, 2), range(2, 4), range(4, 6), range(6, 8)]


def test_partition_uneven_larger_first():
    assert [len(r) for r in partition_channels(7, 4)] == [2, 2, 2, 1]


def test_partition_single():
    assert partition_channels(5, 1) == [range(0, 5)]


def test_partition_too_many_splits():
    with pytest.raises(ValueError):
        partition_channels(3, 4)


@given(st.integers(1, 64), st.data())
def test_partition_covers_contiguously(c, data):
    S = data.draw(st.integers(1, c))
    parts = partition_channels(c, S)
    assert len(parts) == S
    assert parts[0].start == 0 and parts[-1].stop == c
    assert all(a.stop == b.start for a, b in zip(parts, parts[1:]))
    sizes = [len(r) for r in parts]
    assert sizes == sorted(sizes, reverse=True) and max(sizes) - min(sizes) <= 1


# ---------------------------------------------------------------------------
# encoding


def test_encode_worked_example():
    layer = encode_layer(_kernel([0, 5, 0, -3]), S=1, rl_bits=8, weight_format=Q88)
    assert _entries(layer) == [(5 * 256, 2, 0), (-3 * 256, 2, 0)]
    assert layer.counts.tolist() == [2]


def test_encode_small_runlength_fits():
    layer = encode_layer(_kernel([0, 5, 0, -3]), S=1, rl_bits=2, weight_format=Q88)
    assert _entries(layer) == [(5 * 256, 2, 0), (-3 * 256, 2, 0)]


def test_encode_filler_bridges_long_gap():
    layer = encode_layer(_kernel([5, 0, 0, 0, 0, -3]), S=1, rl_bits=2, weight_format=Q88)
    assert _entries(layer) == [(5 * 256, 1, 0), (0, 3, 0), (-3 * 256, 2, 0)]
    assert layer.counts.tolist() == [3]


def test_encode_same_position_different_x():
    w = np.zeros((1, 3, 2, 1))
    w[0, 0, 1, 0], w[0, 2, 1, 0] = 1.0, 2.0
    layer = encode_layer(w, S=1, weight_format=Q88)
    assert _entries(layer) == [(256, 2, 0), (512, 0, 2)]


def test_encode_alignment_pads_shorter_split():
    w = _kernel([1, 1, 1, 0])
    layer = encode_layer(w, S=2, weight_format=Q88)
    assert layer.counts.tolist() == [2]
    assert _entries(layer, 1) == [(256, 1, 0), (0, 0, 0)]


def test_encode_rejects_bad_runlength_bits():
    with pytest.raises(ValueError):
        encode_layer(_kernel([1, 0]), S=1, rl_bits=0)


def test_decode_all_zero_kernel():
    layer = encode_layer(np.zeros((3, 3, 4, 2)), S=2)
    assert layer.entries_per_line == 0
    np.testing.assert_array_equal(decode_layer(layer), np.zeros((3, 3, 4, 2)))


def test_decode_worked_example():
    layer = encode_layer(_kernel([0, 5, 0, -3]), S=1, weight_format=Q88)
    np.testing.assert_array_equal(decode_layer(layer).ravel(), [0, 5 * 256, 0, -3 * 256])


@pytest.mark.parametrize("S", [1, 2, 4])
def test_round_trip_85_percent(S, rng):
    w = prune_magnitude(rng.normal(size=(3, 3, 16, 8)), 0.85)
    layer = encode_layer(w, S)
    np.testing.assert_array_equal(decode_layer(layer), quantize(w, Q88))


def test_decode_rejects_walk_past_split(rng):
    layer = encode_layer(_kernel([0, 5, 0, -3]), S=1)
    layer.streams[0].runlength[1] = 200
    with pytest.raises(StreamDecodeError):
        stream_addresses(layer, 0)


@st.composite
def _kernels(draw):
    kh, kw = draw(st.integers(1, 3)), draw(st.integers(1, 3))
    ci, co = draw(st.integers(1, 12)), draw(st.integers(1, 4))
    seed = draw(st.integers(0, 10_000))
    rate = draw(st.sampled_from([0.0, 0.5, 0.85, 0.95]))
    w = prune_magnitude(np.random.default_rng(seed).normal(size=(kh, kw, ci, co)), rate)
    S = draw(st.integers(1, ci))
    rl_bits = draw(st.integers(1, 8))
    depthwise = draw(st.booleans())
    if depthwise:
        w = w[..., :1]
    return w, S, rl_bits, depthwise


@given(_kernels())
def test_round_trip_property(case):
    w, S, rl_bits, dw = case
    layer = encode_layer(w, S, rl_bits, depthwise=dw)
    np.testing.assert_array_equal(decode_layer(layer), quantize(w, Q88))


@given(_kernels())
def test_alignment_and_count_properties(case):
    w, S, rl_bits, dw = case
    layer = encode_layer(w, S, rl_bits, depthwise=dw)
    wq = quantize(w, Q88)
    for s, st_ in enumerate(layer.streams):
        assert len(st_) == layer.entries_per_line
        rng = layer.partition[s]
        if dw:
            nz = [np.count_nonzero(wq[:, :, c, 0]) for c in range(rng.start, rng.start + len(layer.counts))
                  if c < rng.stop]
        else:
            nz = np.count_nonzero(wq[:, :, rng.start:rng.stop, :], axis=(0, 1, 2)).tolist()
        assert all(r >= n for r, n in zip(st_.raw_lengths.tolist(), nz))
        if rl_bits == 8 and (len(rng) * w.shape[0]) <= 255:
            assert st_.raw_lengths.tolist()[:len(nz)] == list(nz)
    assert np.array_equal(layer.counts, np.max([st_.raw_lengths for st_ in layer.streams], axis=0))
    assert np.array_equal(entry_counts(wq, S, rl_bits, dw), layer.counts)


def test_count_cache_matches(rng):
    wq = quantize(prune_magnitude(rng.normal(size=(3, 3, 8, 4)), 0.5), Q88)
    cache = CountCache(wq)
    for S in (1, 3, 8):
        assert cache.entries(S) == encode_layer(wq, S, quantized=True).entries_per_line
    assert cache.max_splits == 8


# ---------------------------------------------------------------------------
# memory-initialization files


def _stream(w, rl, x):
    a = lambda v: np.array(v, np.int64)
    return SparseStream(0, 0, 1, a(w), a(rl), a(x), a([len(w)]))


def test_meminit_worked_example():
    assert emit_meminit(_stream([-768], [2], [0]), 8, 0, 16) == ["02FD00"]


def test_meminit_zero_entry():
    assert emit_meminit(_stream([0], [0], [0]), 8, 0, 16) == ["000000"]


def test_meminit_x_field_packed_high():
    assert emit_meminit(_stream([1], [0], [3]), 8, 2, 16) == ["3000001"]


@pytest.mark.parametrize("w,rl,x", [([40000], [0], [0]), ([0], [256], [0]), ([0], [0], [1])])
def test_meminit_field_overflow(w, rl, x):
    with pytest.raises(FieldOverflowError):
        emit_meminit(_stream(w, rl, x), 8, 0, 16)


def test_parse_rejects_malformed():
    with pytest.raises(StreamDecodeError):
        parse_meminit(["02FD0"], 8, 0, 16)
    with pytest.raises(StreamDecodeError):
        parse_meminit(["02FZ00"], 8, 0, 16)


@given(_kernels())
def test_meminit_round_trip(case):
    w, S, rl_bits, dw = case
    layer = encode_layer(w, S, rl_bits, depthwise=dw)
    for st_ in layer.streams:
        lines = emit_meminit(st_, rl_bits, layer.x_bits, 16)
        pw, prl, px = parse_meminit(lines, rl_bits, layer.x_bits, 16)
        assert np.array_equal(pw, st_.weight) and np.array_equal(prl, st_.runlength)
        assert np.array_equal(px, st_.x_index)


def test_layer_files_round_trip(tmp_path, rng):
    w = prune_magnitude(rng.normal(size=(3, 3, 16, 8)), 0.85)
    layer = encode_layer(w, 4)
    names = write_layer_files(layer, "conv1", tmp_path)
    assert names == ["conv1_split0.hex", "conv1_split1.hex", "conv1_split2.hex", "conv1_split3.hex",
                     "conv1_oc_counts.txt"]
    assert (tmp_path / "conv1_oc_counts.txt").read_text().split() == [str(c) for c in layer.counts]
    back = read_layer_files(tmp_path, "conv1", kh=3, kw=3, c_in=16, c_out=8, S=4, rl_bits=8, x_bits=layer.x_bits,
                            weight_format=Q88, depthwise=False)
    assert isinstance(back, EncodedLayer)
    np.testing.assert_array_equal(decode_layer(back), decode_layer(layer))
    for a, b in zip(back.streams, layer.streams):
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.runlength, b.runlength)


def test_truncated_hex_file_rejected(tmp_path, rng):
    layer = encode_layer(prune_magnitude(rng.normal(size=(3, 3, 4, 2)), 0.5), 2)
    write_layer_files(layer, "c", tmp_path)
    p = tmp_path / "c_split1.hex"
    p.write_text("".join(p.read_text().splitlines(keepends=True)[:-1]))
    with pytest.raises(StreamDecodeError):
        read_layer_files(tmp_path, "c", kh=3, kw=3, c_in=4, c_out=2, S=2, rl_bits=8, x_bits=layer.x_bits,
                         weight_format=Q88, depthwise=False)
