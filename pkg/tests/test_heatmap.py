import numpy as np
import pytest

from latentweave import heatmap, tasks
from latentweave.model import ModelConfig, TransformerModel


def model_for(seed, k=4, hidden=32):
    cfg = ModelConfig(vocab_size=tasks.VOCAB_SIZE, hidden_dim=hidden, n_layers=2,
                      n_heads=4, max_seq_len=200, latent_k=k,
                      patch_feature_dim=tasks.PATCH_FEATURE_DIM, seed=seed)
    return TransformerModel(cfg)


def traj_with_steps(family, seed, min_steps=1):
    spec = tasks.DatasetSpec(family=family, size=1, width=4, height=4,
                             max_steps=4, max_hazards=2, seed=seed)
    gen = tasks.gen_gridnav_one if family == "gridnav" else tasks.gen_count_one
    for s in range(seed, seed + 500):
        t = gen(spec, s)
        if len(t.steps) >= min_steps:
            return t
    raise AssertionError("no trajectory with enough steps")


class TestCosineAggregation:
    def test_uniform_similarities_uniform_map(self):
        # constant positive cosine rows smooth and normalize to 1/cells
        vecs = np.ones((3, 5))
        cells = np.ones((16, 5))
        sims = heatmap._cosine_matrix(vecs, cells)
        rel = np.maximum(sims, 0.0).mean(axis=0).reshape(4, 4)
        from scipy.ndimage import gaussian_filter
        rel = gaussian_filter(rel, sigma=0.0, mode="constant")
        rel /= rel.sum()
        assert np.allclose(rel, 1.0 / 16, atol=1e-12)

    def test_dominant_candidate_wins_argmax(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=6)
        cells = rng.normal(size=(16, 6)) * 0.01
        cells[10] = 5.0 * q
        sims = heatmap._cosine_matrix(q[None, :], cells)
        rel = np.maximum(sims, 0.0).mean(axis=0)
        assert int(np.argmax(rel)) == 10

    def test_zero_norm_rows_score_zero(self):
        vecs = np.zeros((2, 4))
        cells = np.ones((3, 4))
        assert np.all(heatmap._cosine_matrix(vecs, cells) == 0.0)


class TestRelevanceMaps:
    def test_one_map_per_latent_segment(self):
        model = model_for(1)
        traj = traj_with_steps("gridnav", 1, min_steps=2)
        maps = heatmap.relevance_maps(model, traj, k=4)
        assert len(maps) == len(traj.steps)
        for m in maps:
            assert m.shape == (4, 4)

    def test_normalized_and_non_negative_100_pairs(self):
        for seed in range(100):
            model = model_for(seed, k=2, hidden=16)
            family = "gridnav" if seed % 2 == 0 else "count"
            traj = traj_with_steps(family, seed % 13 + 1)
            for m in heatmap.relevance_maps(model, traj, k=2):
                assert np.all(m >= 0.0)
                assert abs(m.sum() - 1.0) < 1e-9

    def test_uniform_fallback_when_all_suppressed(self, monkeypatch):
        model = model_for(3)
        traj = traj_with_steps("gridnav", 2)
        monkeypatch.setattr(heatmap, "_cosine_matrix",
                            lambda v, c, eps=1e-12: -np.ones((v.shape[0], c.shape[0])))
        maps = heatmap.relevance_maps(model, traj, k=4)
        for m in maps:
            assert np.allclose(m, 1.0 / m.size, atol=1e-12)

    def test_deterministic(self):
        model = model_for(5)
        traj = traj_with_steps("count", 4)
        a = heatmap.relevance_maps(model, traj, k=4)
        b = heatmap.relevance_maps(model, traj, k=4)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestWriteMaps:
    def test_writes_one_file_per_segment(self, tmp_path):
        model = model_for(6)
        traj = traj_with_steps("gridnav", 3, min_steps=2)
        maps = heatmap.relevance_maps(model, traj, k=4, sigma=1.0)
        paths = heatmap.write_maps(maps, tmp_path)
        assert len(paths) == len(traj.steps)
        for p in paths:
            grid = np.loadtxt(p)
            assert grid.shape == (4, 4)
            assert abs(grid.sum() - 1.0) < 1e-6
