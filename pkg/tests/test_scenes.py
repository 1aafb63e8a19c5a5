import json

import numpy as np
import pytest

from amodalkit.graph import occluders_of
from amodalkit.masks import BinaryMask, read_mask_png, read_rgba_png
from amodalkit.scenes import (
    SceneConfig,
    count_bin,
    derive_graph,
    emit_dataset,
    instance_id,
    load_manifest,
    load_record,
    pct_bin,
    resolution_bin,
    sample_scene,
    statistics,
)


def brute_force_modal(scene, k):
    """Per-pixel painter's oracle: nearest covering layer owns the pixel."""
    w, h = scene.canvas
    owner = np.full((h, w), -1)
    for idx, layer in enumerate(scene.layers):
        owner[layer.amodal.data] = idx  # later layers are nearer and win
    return BinaryMask(owner == k)


class TestSampleScene:
    def test_single_layer_config_has_no_edges(self):
        cfg = SceneConfig(layer_range=(1, 1))
        g = derive_graph(sample_scene(cfg, 5))
        assert not g.edges

    def test_determinism(self):
        cfg = SceneConfig()
        a = sample_scene(cfg, 123)
        b = sample_scene(cfg, 123)
        assert a.background == b.background
        assert len(a.layers) == len(b.layers)
        for la, lb in zip(a.layers, b.layers):
            assert la.amodal == lb.amodal
            assert la.rgba == lb.rgba
        assert a.composite() == b.composite()

    def test_different_seeds_differ(self):
        cfg = SceneConfig()
        assert sample_scene(cfg, 1).composite() != sample_scene(cfg, 2).composite()

    def test_layer_amodal_masks_nonempty(self):
        for seed in range(20):
            scene = sample_scene(SceneConfig(), seed)
            for layer in scene.layers:
                assert not layer.amodal.is_empty

    def test_infeasible_config_rejected(self):
        with pytest.raises(ValueError, match="exceeds canvas"):
            sample_scene(SceneConfig(canvas=(16, 16), size_range=(32, 64)), 0)

    def test_modal_matches_painters_oracle(self):
        # pixel-exact check of the amodal-minus-nearer identity
        cfg = SceneConfig()
        for seed in range(50):
            scene = sample_scene(cfg, seed)
            for k in range(len(scene.layers)):
                assert scene.modal_mask(k) == brute_force_modal(scene, k)

    def test_thousand_scene_painter_sweep(self):
        # the large randomized sweep behind the dataset's exactness claim
        cfg = SceneConfig()
        for seed in range(1000):
            scene = sample_scene(cfg, seed)
            for k in range(len(scene.layers)):
                assert scene.modal_mask(k) == brute_force_modal(scene, k), f"seed {seed} layer {k}"

    def test_painters_identity(self):
        # modal plus the covered part reassembles the amodal mask exactly
        for seed in range(20):
            scene = sample_scene(SceneConfig(), seed)
            for k, layer in enumerate(scene.layers):
                nearer = np.zeros(layer.amodal.data.shape, dtype=bool)
                for other in scene.layers[k + 1 :]:
                    nearer |= other.amodal.data
                reassembled = scene.modal_mask(k).data | (nearer & layer.amodal.data)
                assert np.array_equal(reassembled, layer.amodal.data)


class TestDeriveGraph:
    def test_edges_match_pairwise_overlap_oracle(self):
        for seed in range(30):
            scene = sample_scene(SceneConfig(), seed)
            g = derive_graph(scene)
            n = len(scene.layers)
            expected = set()
            for i in range(n):
                for j in range(n):
                    if i > j and (scene.layers[i].amodal.data & scene.layers[j].amodal.data).any():
                        expected.add((instance_id(i), instance_id(j)))
            assert g.edges == frozenset(expected)

    def test_two_fully_stacked_layers(self):
        # find a seed with full containment is fragile; construct by checking
        # the derived modal of the deeper layer on any overlapping pair
        scene = sample_scene(SceneConfig(), 3)
        g = derive_graph(scene)
        for i, j in g.edges:
            deeper = g.instances[j]
            upper = g.instances[i]
            assert not (deeper.modal.data & upper.amodal.data)[
                scene.layers[int(i[1:])].amodal.data
            ].any()


class TestEmitDataset:
    def test_empty_scene_list(self, tmp_path):
        manifest = emit_dataset([], tmp_path / "ds")
        assert manifest.records == ()
        assert (tmp_path / "ds" / "manifest.jsonl").read_text() == ""

    def test_occluded_record_count_matches_graph(self, tmp_path):
        scenes_list = [sample_scene(SceneConfig(), s) for s in range(5)]
        manifest = emit_dataset(scenes_list, tmp_path / "ds")
        expected = 0
        for scene in scenes_list:
            g = derive_graph(scene)
            for k in range(len(scene.layers)):
                if occluders_of(g, instance_id(k)):
                    expected += 1
        assert len(manifest.occluded) == expected

    def test_roundtrip_masks_bit_exact(self, tmp_path):
        scene = sample_scene(SceneConfig(), 7)
        manifest = emit_dataset([scene], tmp_path / "ds")
        g = derive_graph(scene)
        for rec in manifest.occluded:
            lid = rec.id.split(".")[-1]
            k = int(lid[1:])
            loaded = load_record(manifest, rec)
            assert loaded.modal == g.instances[lid].modal
            assert loaded.amodal_mask == scene.layers[k].amodal
            assert loaded.image == scene.composite()
            assert loaded.amodal_rgba.data[loaded.amodal_mask.data].tolist() == (
                scene.layers[k].rgba.data[loaded.amodal_mask.data].tolist()
            )

    def test_unoccluded_marker_and_no_zero_pct_records(self, tmp_path):
        scenes_list = [sample_scene(SceneConfig(), s) for s in range(5)]
        manifest = emit_dataset(scenes_list, tmp_path / "ds")
        for rec in manifest.records:
            if rec.state == "occluded":
                assert rec.occlusion_pct > 0
            else:
                assert rec.state == "unoccluded"
                assert not rec.files

    def test_manifest_reload(self, tmp_path):
        manifest = emit_dataset([sample_scene(SceneConfig(), 1)], tmp_path / "ds")
        again = load_manifest(tmp_path / "ds")
        assert [r.id for r in again.records] == [r.id for r in manifest.records]

    def test_meta_lists_ordered_occluders(self, tmp_path):
        scene = sample_scene(SceneConfig(), 11)
        manifest = emit_dataset([scene], tmp_path / "ds")
        g = derive_graph(scene)
        for rec in manifest.occluded:
            meta = json.loads(manifest.path_of(rec.files["meta"]).read_text())
            lid = rec.id.split(".")[-1]
            assert meta["occluder_ids"] == occluders_of(g, lid)
            assert meta["caption"] is None


class TestStatistics:
    def test_bin_rules(self):
        assert pct_bin(0.5) == 5
        assert pct_bin(1.0) == 9
        assert count_bin(1) == "1"
        assert count_bin(7) == "5+"
        assert resolution_bin(33) == 64
        assert resolution_bin(64) == 64

    def test_single_record(self, tmp_path):
        scene = sample_scene(SceneConfig(layer_range=(2, 2)), 2)
        manifest = emit_dataset([scene], tmp_path / "ds")
        if not manifest.occluded:
            pytest.skip("seed produced no occlusion")
        stats = statistics(manifest)
        assert stats.total == len(manifest.occluded)
        assert sum(stats.occlusion_pct_histogram) == stats.total
        rec = manifest.occluded[0]
        assert stats.occlusion_pct_histogram[pct_bin(rec.occlusion_pct)] >= 1

    def test_totals_conserved(self, tmp_path):
        scenes_list = [sample_scene(SceneConfig(), s) for s in range(8)]
        manifest = emit_dataset(scenes_list, tmp_path / "ds")
        stats = statistics(manifest)
        stats.validate()
        assert stats.total == len(manifest.occluded)

    def test_matches_brute_force_recomputation(self, tmp_path):
        scenes_list = [sample_scene(SceneConfig(), s) for s in range(10)]
        manifest = emit_dataset(scenes_list, tmp_path / "ds")
        stats = statistics(manifest)
        # independent pass over the emitted pixel data
        pct_hist = [0] * 10
        res_hist: dict[int, int] = {}
        for rec in manifest.occluded:
            modal = read_mask_png(manifest.path_of(rec.files["modal"]))
            amodal = read_rgba_png(manifest.path_of(rec.files["amodal"])).alpha_mask()
            pct = 1.0 - modal.area / amodal.area
            pct_hist[pct_bin(pct)] += 1
            box = amodal.bbox()
            side = max(box[2] - box[0], box[3] - box[1])
            res_hist[resolution_bin(side)] = res_hist.get(resolution_bin(side), 0) + 1
        assert tuple(pct_hist) == stats.occlusion_pct_histogram
        assert res_hist == stats.amodal_resolution_histogram
