import numpy as np
import pytest

from amodalkit.graph import (
    InstanceRecord,
    OcclusionGraph,
    load_graph,
    occluders_of,
    occlusion_percentage,
    save_graph,
    validate,
)
from amodalkit.masks import BinaryMask
from amodalkit.scenes import SceneConfig, derive_graph, instance_id, sample_scene


def block(x0, y0, x1, y1, size=16):
    arr = np.zeros((size, size), dtype=bool)
    arr[y0:y1, x0:x1] = True
    return BinaryMask(arr)


def record(iid, modal, amodal=None, depth=None):
    return InstanceRecord(id=iid, modal=modal, amodal=amodal, depth=depth)


class TestOccludersOf:
    def test_no_incoming_edges(self):
        g = OcclusionGraph.build([record("a", block(0, 0, 4, 4))], [])
        assert occluders_of(g, "a") == []

    def test_chain_returns_direct_occluder_only(self):
        # C occludes B, B occludes A: querying A sees only B
        g = OcclusionGraph.build(
            [
                record("a", block(0, 0, 8, 4)),
                record("b", block(4, 0, 12, 4)),
                record("c", block(8, 0, 16, 4)),
            ],
            [("c", "b"), ("b", "a")],
        )
        assert occluders_of(g, "a") == ["b"]

    def test_three_layer_stack_orders_nearest_first(self):
        # depth 0 is nearest; both upper layers overlap the bottom
        g = OcclusionGraph.build(
            [
                record("bottom", block(0, 0, 10, 10), amodal=block(0, 0, 10, 10), depth=2.0),
                record("mid", block(2, 2, 8, 8), amodal=block(2, 2, 8, 8), depth=1.0),
                record("top", block(4, 4, 6, 6), amodal=block(4, 4, 6, 6), depth=0.0),
            ],
            [("mid", "bottom"), ("top", "bottom"), ("top", "mid")],
        )
        assert occluders_of(g, "bottom") == ["top", "mid"]

    def test_no_depth_falls_back_to_edge_topology(self):
        g = OcclusionGraph.build(
            [
                record("a", block(0, 0, 10, 10)),
                record("b", block(2, 2, 8, 8)),
                record("c", block(4, 4, 6, 6)),
            ],
            [("b", "a"), ("c", "a"), ("c", "b")],
        )
        # c occludes b, so c is nearer and comes first
        assert occluders_of(g, "a") == ["c", "b"]

    def test_unknown_target(self):
        g = OcclusionGraph.build([], [])
        with pytest.raises(KeyError):
            occluders_of(g, "ghost")

    def test_deterministic_under_insertion_order(self):
        recs = [
            record("b", block(2, 2, 8, 8), depth=1.0),
            record("a", block(0, 0, 10, 10), depth=2.0),
            record("c", block(4, 4, 6, 6), depth=0.0),
        ]
        edges = [("b", "a"), ("c", "a")]
        g1 = OcclusionGraph.build(recs, edges)
        g2 = OcclusionGraph.build(list(reversed(recs)), list(reversed(edges)))
        assert occluders_of(g1, "a") == occluders_of(g2, "a")


class TestOcclusionPercentage:
    def test_unoccluded(self):
        m = block(0, 0, 4, 4)
        assert occlusion_percentage(record("a", m, amodal=m)) == 0.0

    def test_fully_occluded(self):
        assert occlusion_percentage(record("a", block(0, 0, 0, 0), amodal=block(0, 0, 4, 4))) == 1.0

    def test_half(self):
        inst = record("a", block(0, 0, 4, 2), amodal=block(0, 0, 4, 4))
        assert occlusion_percentage(inst) == 0.5

    def test_missing_amodal_rejected(self):
        with pytest.raises(ValueError, match="no amodal"):
            occlusion_percentage(record("a", block(0, 0, 4, 4)))


class TestValidate:
    def test_empty_graph_clean(self):
        assert validate(OcclusionGraph.build([], [])) == []

    def test_self_edge(self):
        g = OcclusionGraph.build([record("a", block(0, 0, 4, 4))], [("a", "a")])
        kinds = [f.kind for f in validate(g)]
        assert kinds == ["self_edge"]

    def test_mutual_occlusion_flagged_not_rejected(self):
        g = OcclusionGraph.build(
            [record("a", block(0, 0, 6, 6)), record("b", block(4, 4, 10, 10))],
            [("a", "b"), ("b", "a")],
        )
        findings = validate(g)
        assert [f.kind for f in findings] == ["mutual_occlusion"]

    def test_dangling_edge(self):
        g = OcclusionGraph.build([record("a", block(0, 0, 4, 4))], [("a", "ghost")])
        assert [f.kind for f in validate(g)] == ["dangling_edge"]

    def test_disjoint_bboxes(self):
        g = OcclusionGraph.build(
            [record("a", block(0, 0, 3, 3)), record("b", block(10, 10, 14, 14))],
            [("a", "b")],
        )
        assert [f.kind for f in validate(g)] == ["disjoint_bboxes"]


class TestInvariants:
    def test_modal_must_be_subset_of_amodal(self):
        with pytest.raises(ValueError, match="subset"):
            record("a", block(0, 0, 6, 6), amodal=block(0, 0, 4, 4))

    def test_synthetic_percentage_matches_brute_force(self):
        for seed in range(10):
            scene = sample_scene(SceneConfig(), seed)
            g = derive_graph(scene)
            for k, layer in enumerate(scene.layers):
                inst = g.instances[instance_id(k)]
                if inst.amodal.area == 0:
                    continue
                hidden = int((layer.amodal.data & ~inst.modal.data).sum())
                expected = hidden / layer.amodal.area
                assert occlusion_percentage(inst) == pytest.approx(expected)


def test_json_roundtrip(tmp_path):
    g = OcclusionGraph.build(
        [
            record("a", block(0, 0, 8, 8), amodal=block(0, 0, 8, 8), depth=1.0),
            InstanceRecord("b", block(4, 4, 10, 10), category="ellipse"),
        ],
        [("b", "a")],
    )
    path = tmp_path / "graph.json"
    save_graph(g, path)
    loaded = load_graph(path)
    assert set(loaded.instances) == {"a", "b"}
    assert loaded.edges == g.edges
    assert loaded.instances["a"].modal == g.instances["a"].modal
    assert loaded.instances["a"].amodal == g.instances["a"].amodal
    assert loaded.instances["b"].category == "ellipse"
    assert loaded.instances["a"].depth == 1.0
