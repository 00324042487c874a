import json

import numpy as np
import pytest

from layerpipe import codegen, flow
from layerpipe.graph import Node, OpKind
from layerpipe.netgen import NetSpec, generate
from layerpipe.pipesim import simulate
from layerpipe.sparsity import StreamDecodeError

from conftest import conv, make_graph, placeholder


@pytest.fixture
def chain(rng):
    g = make_graph([placeholder(h=6, w=6, c=8), conv("conv/a", "x", rng.normal(size=(3, 3, 8, 4)), pad=1),
                    Node("r", OpKind.RELU, ("conv/a",))])
    return flow.compile_graph(g, dsp_target=100)


def test_manifest_lists_instances_and_edges(chain, tmp_path):
    path = codegen.emit(chain.graph, chain.plans, chain.layers, tmp_path)
    m = json.loads(path.read_text())
    assert sorted(m["nodes"]) == ["conv/a", "r", "x"]
    assert [(e["src"], e["dst"], e["port"]) for e in m["edges"]] == [("x", "conv/a", 0), ("conv/a", "r", 0)]
    assert m["total_dsps"] == chain.plans.total_dsps <= 100


def test_one_hex_file_per_split(chain, tmp_path):
    S = chain.plans["conv/a"].S
    assert S > 1
    codegen.emit(chain.graph, chain.plans, chain.layers, tmp_path)
    hexes = sorted(p.name for p in (tmp_path / "mem").glob("*.hex"))
    assert hexes == [f"conv_a_split{k}.hex" for k in range(S)]
    counts = (tmp_path / "mem" / "conv_a_oc_counts.txt").read_text().split()
    assert [int(c) for c in counts] == chain.layers["conv/a"].counts.tolist()
    assert (tmp_path / "report" / "balance.csv").read_text().startswith("node,kind,S,")
    assert "total DSPs" in (tmp_path / "report" / "summary.txt").read_text()


def test_reload_reproduces_plan_streams_and_simulation(tmp_path):
    c = flow.compile_graph(generate(NetSpec("resnet-like", 1, 4, (8, 8, 3), seed=2)), sparsity=0.85)
    codegen.emit(c.graph, c.plans, c.layers, tmp_path)
    g, plans, layers = codegen.load(tmp_path)
    assert g == c.graph
    assert plans.plans == c.plans.plans
    for nid, layer in c.layers.items():
        np.testing.assert_array_equal(layers[nid].counts, layer.counts)
        for a, b in zip(layers[nid].streams, layer.streams):
            assert np.array_equal(a.weight, b.weight) and np.array_equal(a.runlength, b.runlength)
            assert np.array_equal(a.x_index, b.x_index)
    images = flow.random_images(g, 3)
    r0 = simulate(c.graph, c.plans, c.layers, images, trace=tmp_path / "t0.csv")
    r1 = simulate(g, plans, layers, images, trace=tmp_path / "t1.csv")
    assert r0.dumps() == r1.dumps()
    assert (tmp_path / "t0.csv").read_text() == (tmp_path / "t1.csv").read_text()
    for a, b in zip(r0.outputs, r1.outputs):
        for o in a:
            assert codegen.images_equal(a[o], b[o]) is None


def test_emission_is_byte_deterministic(tmp_path):
    def build(d):
        c = flow.compile_graph(generate(NetSpec("random-dag", 2, 4, (8, 8, 3), seed=9)), sparsity=0.5)
        codegen.emit(c.graph, c.plans, c.layers, d)
        return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}

    assert build(tmp_path / "a") == build(tmp_path / "b")


def test_corrupted_hex_detected(chain, tmp_path):
    codegen.emit(chain.graph, chain.plans, chain.layers, tmp_path)
    p = tmp_path / "mem" / "conv_a_split0.hex"
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(StreamDecodeError):
        codegen.load(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(codegen.ManifestError):
        codegen.load(tmp_path)


def test_plan_stream_mismatch_rejected(chain, tmp_path):
    layers = dict(chain.layers)
    del layers["conv/a"]
    with pytest.raises(codegen.ManifestError):
        codegen.emit(chain.graph, chain.plans, layers, tmp_path)


def test_quantize_parameters_idempotent(rng):
    g = make_graph([placeholder(), conv("c", "x", rng.normal(size=(3, 3, 3, 2)))])
    once = codegen.quantize_parameters(g)
    assert codegen.quantize_parameters(once) == once
    assert np.all(once["c"].weights * 256 == np.round(once["c"].weights * 256))


def test_images_equal_reports_first_difference():
    a = np.zeros((2, 3))
    b = a.copy()
    assert codegen.images_equal(a, b) is None
    b[1, 2] = 1
    assert codegen.images_equal(a, b) == (1, 2)
