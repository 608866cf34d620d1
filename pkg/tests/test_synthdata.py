import json
import math

import numpy as np
import pytest
from scipy.special import gammaln

from querydistill import geometry
from querydistill.synthdata import (
    FeatureEmbedder,
    Scene,
    SceneConfig,
    generate_scene,
    generate_scenes,
    load_scenes,
    save_scenes,
    scene_seed,
)

CFG = SceneConfig()


class TestGenerateScene:
    def test_same_seed_bit_identical(self):
        a = generate_scene(1234, CFG)
        b = generate_scene(1234, CFG)
        assert a.seed == b.seed
        assert len(a.objects) == len(b.objects)
        for ga, gb in zip(a.objects, b.objects):
            assert ga.box.as_tuple() == gb.box.as_tuple()
            assert ga.class_index == gb.class_index

    def test_all_boxes_within_bounds(self):
        for i in range(10_000):
            scene = generate_scene(scene_seed(7, i), CFG)
            assert 1 <= len(scene.objects) <= CFG.max_objects
            for g in scene.objects:
                x1, y1, x2, y2 = geometry.to_corners(g.box)
                assert 0.0 <= x1 <= x2 <= 1.0
                assert 0.0 <= y1 <= y2 <= 1.0
                assert CFG.size_min * 0.999 <= g.box.w <= CFG.size_max * 1.001
                assert 0 <= g.class_index < CFG.num_classes

    def test_overlap_cap_enforced(self):
        for i in range(2000):
            scene = generate_scene(scene_seed(11, i), CFG)
            for a in range(len(scene.objects)):
                for b in range(a + 1, len(scene.objects)):
                    assert (
                        geometry.iou(scene.objects[a].box, scene.objects[b].box)
                        <= CFG.max_overlap_iou + 1e-12
                    )

    def test_object_count_uniform_within_3_sigma(self):
        n = 10_000
        counts = np.zeros(CFG.max_objects + 1)
        for i in range(n):
            counts[len(generate_scene(scene_seed(3, i), CFG).objects)] += 1
        p = 1.0 / CFG.max_objects
        sigma = math.sqrt(n * p * (1 - p))
        for k in range(1, CFG.max_objects + 1):
            assert abs(counts[k] - n * p) < 3 * sigma

    def test_rejection_budget_error(self):
        # many large boxes cannot all avoid overlapping
        cfg = SceneConfig(
            max_objects=6, size_min=0.9, size_max=0.95, max_overlap_iou=0.01,
            rejection_budget=50,
        )
        seeds = [scene_seed(5, i) for i in range(50)]
        with pytest.raises(RuntimeError):
            for s in seeds:
                generate_scene(s, cfg)

    def test_streams_are_disjoint(self):
        train = generate_scenes(0, 16, CFG, stream=0)
        val = generate_scenes(0, 16, CFG, stream=1)
        train_sig = {tuple(g.box.as_tuple() for g in s.objects) for s in train}
        val_sig = {tuple(g.box.as_tuple() for g in s.objects) for s in val}
        assert not train_sig & val_sig


class TestRenderFeatures:
    def test_empty_cells_norm_matches_chi_mean(self):
        cfg = SceneConfig()
        embedder = FeatureEmbedder(0, cfg)
        norms = []
        for i in range(300):
            scene = generate_scene(scene_seed(21, i), cfg)
            grid = embedder.render(scene)
            ux, uy = embedder.centers[:, 0], embedder.centers[:, 1]
            covered = np.zeros(len(ux), dtype=bool)
            for g in scene.objects:
                x1, y1, x2, y2 = geometry.to_corners(g.box)
                covered |= (ux >= x1) & (ux <= x2) & (uy >= y1) & (uy <= y2)
            if (~covered).any():
                norms.extend(np.linalg.norm(grid[~covered], axis=1).tolist())
        d = cfg.d_model
        # exact chi-distribution mean: sigma * sqrt(2) * Gamma((d+1)/2)/Gamma(d/2)
        chi_mean = cfg.noise_sigma * math.sqrt(2) * math.exp(
            gammaln((d + 1) / 2) - gammaln(d / 2)
        )
        assert np.mean(norms) == pytest.approx(chi_mean, rel=0.02)

    def test_moving_object_moves_signal_cells(self):
        cfg = SceneConfig(noise_sigma=0.0)
        embedder = FeatureEmbedder(0, cfg)
        near = Scene(seed=1, objects=[])
        from querydistill.geometry import Box
        from querydistill.synthdata import GroundTruth

        left = Scene(seed=1, objects=[GroundTruth(Box(0.2, 0.5, 0.2, 0.2), 0)])
        right = Scene(seed=1, objects=[GroundTruth(Box(0.8, 0.5, 0.2, 0.2), 0)])
        g_left = embedder.render(left)
        g_right = embedder.render(right)
        left_cells = set(np.nonzero(np.abs(g_left).sum(axis=1) > 0)[0].tolist())
        right_cells = set(np.nonzero(np.abs(g_right).sum(axis=1) > 0)[0].tolist())
        assert left_cells and right_cells and not left_cells & right_cells
        # the active-cell pattern shifts by the same x offset
        grid = cfg.grid_size
        shifted = {c + round(0.6 * grid) for c in left_cells}
        assert shifted == right_cells

    def test_sigma_zero_is_pure_function_of_scene(self):
        cfg = SceneConfig(noise_sigma=0.0)
        embedder = FeatureEmbedder(0, cfg)
        scene = generate_scene(scene_seed(9, 0), cfg)
        assert np.array_equal(embedder.render(scene), embedder.render(scene))

    def test_render_deterministic_with_noise(self):
        embedder = FeatureEmbedder(0, CFG)
        scene = generate_scene(scene_seed(9, 1), CFG)
        assert np.array_equal(embedder.render(scene), embedder.render(scene))

    def test_linear_probe_classifies_singly_covered_cells(self):
        cfg = SceneConfig()
        embedder = FeatureEmbedder(0, cfg)
        xs, ys = [], []
        for i in range(400):
            scene = generate_scene(scene_seed(33, i), cfg)
            grid = embedder.render(scene)
            ux, uy = embedder.centers[:, 0], embedder.centers[:, 1]
            cover_count = np.zeros(len(ux), dtype=np.int64)
            cover_class = np.zeros(len(ux), dtype=np.int64)
            for g in scene.objects:
                x1, y1, x2, y2 = geometry.to_corners(g.box)
                inside = (ux >= x1) & (ux <= x2) & (uy >= y1) & (uy <= y2)
                cover_count += inside
                cover_class[inside] = g.class_index
            single = cover_count == 1
            xs.append(grid[single])
            ys.append(cover_class[single])
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        half = len(x) // 2
        # one-vs-all ridge probe fit on the first half
        targets = np.eye(cfg.num_classes)[y[:half]]
        design = np.hstack([x[:half], np.ones((half, 1))])
        w, *_ = np.linalg.lstsq(
            design.T @ design + 1e-3 * np.eye(design.shape[1]), design.T @ targets,
            rcond=None,
        )
        test_design = np.hstack([x[half:], np.ones((len(x) - half, 1))])
        pred = np.argmax(test_design @ w, axis=1)
        accuracy = float(np.mean(pred == y[half:]))
        assert accuracy > 0.90


class TestSceneFile:
    def test_round_trip(self, tmp_path):
        scenes = generate_scenes(5, 20, CFG)
        path = tmp_path / "scenes.jsonl"
        save_scenes(scenes, path)
        loaded = load_scenes(path)
        assert len(loaded) == len(scenes)
        for a, b in zip(scenes, loaded):
            assert a.seed == b.seed
            for ga, gb in zip(a.objects, b.objects):
                assert ga.box.as_tuple() == gb.box.as_tuple()
                assert ga.class_index == gb.class_index

    def test_schema_one_scene_per_line(self, tmp_path):
        scenes = generate_scenes(5, 3, CFG)
        path = tmp_path / "scenes.jsonl"
        save_scenes(scenes, path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 3
        record = json.loads(lines[0])
        assert set(record) == {"seed", "objects"}
        assert set(record["objects"][0]) == {"cx", "cy", "w", "h", "class"}
