import numpy as np
import pytest

from pcdistill import diffcore as dc
from pcdistill import nets
from pcdistill.bkr import LevelFeature
from pcdistill.errors import ConfigError
from pcdistill.pointops import PointCloud, fps, knn

CFG = nets.EncoderConfig(points_per_level=(16, 4, 1), dims_per_level=(8, 16, 32), knn_group=4)


def cloud(rng, n=40):
    return PointCloud(rng.uniform(-1, 1, (n, 3)))


class TestConfig:
    def test_scaled_dims(self):
        cfg = nets.EncoderConfig(dims_per_level=(32, 64, 128), width_scale=1 / 8)
        assert cfg.dims == (4, 8, 16)
        assert nets.EncoderConfig(dims_per_level=(3, 2, 1), width_scale=1 / 8).dims == (1, 1, 1)

    @pytest.mark.parametrize("kw", [
        dict(points_per_level=(16, 16, 1)),
        dict(points_per_level=(16, 4), dims_per_level=(8, 8, 8)),
        dict(knn_group=0),
        dict(num_classes=1),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            nets.EncoderConfig(**kw)


class TestSaLevel:
    def test_degenerate_grouping_is_pointwise_mlp(self, rng):
        pos = rng.uniform(-1, 1, (10, 3))
        feat = rng.normal(size=(10, 2))
        W, b = dc.const(rng.normal(size=(5, 4))), dc.const(rng.normal(size=(1, 4)))
        out = nets.sa_level(LevelFeature(0, pos, dc.const(feat)), 10, 1, W, b, seed=3)
        idx = nets.plan_level(pos, 10, 1, 3).groups[:, 0]
        expected = np.maximum(0, np.hstack([feat[idx], np.zeros((10, 3))]) @ W.data + b.data)
        np.testing.assert_allclose(out.features.data, expected, atol=1e-14)

    def test_shapes_and_errors(self, rng):
        pos = rng.uniform(-1, 1, (20, 3))
        W, b = dc.const(rng.normal(size=(5, 6))), dc.const(np.zeros((1, 6)))
        out = nets.sa_level(LevelFeature(0, pos, dc.const(rng.normal(size=(20, 2)))), 7, 4, W, b, 0)
        assert out.features.shape == (7, 6) and out.positions.shape == (7, 3)
        with pytest.raises(ConfigError):
            nets.sa_level(LevelFeature(0, pos, dc.const(np.zeros((20, 2)))), 21, 4, W, b, 0)

    def test_input_permutation(self, rng):
        pos = rng.uniform(-1, 1, (15, 3))
        feat = rng.normal(size=(15, 2))
        W, b = dc.const(rng.normal(size=(5, 3))), dc.const(rng.normal(size=(1, 3)))
        perm = rng.permutation(15)
        start = 4
        # pin the same start point in both orderings so FPS selects the same set
        plan_a = nets.plan_level(pos, 6, 4, 0)

        def run(p, f, s):
            idx = fps(p, 6, start=s)
            plan = nets.LevelPlan(p[idx], knn(p[idx], p, 4).indices, False)
            out = nets.apply_level(LevelFeature(0, p, dc.const(f)), plan, W, b)
            return sorted(map(tuple, np.hstack([out.positions, out.features.data]).round(12)))
        inv = np.argsort(perm)
        assert run(pos, feat, start) == run(pos[perm], feat[perm], int(inv[start]))
        assert plan_a.positions.shape == (6, 3)


class TestForward:
    def test_shapes_and_determinism(self, rng):
        store = nets.init_encoder(CFG)
        c = cloud(rng)
        t1 = nets.forward(c, CFG, store, seed=5)
        t2 = nets.forward(c, CFG, store, seed=5)
        assert [lf.features.shape for lf in t1.levels] == [(16, 8), (4, 16), (1, 32)]
        assert t1.logits.shape == (1, 4)
        assert t1.levels[-1].is_global
        for a, b in zip(t1.levels, t2.levels):
            np.testing.assert_array_equal(a.features.data, b.features.data)
        np.testing.assert_array_equal(t1.logits.data, t2.logits.data)
        assert np.all(np.isfinite(t1.logits.data))

    def test_subset_chain(self, rng):
        trace = nets.forward(cloud(rng), CFG, nets.init_encoder(CFG), seed=1)
        prev = trace.geometry[0].positions
        for plan in trace.geometry[1:-1]:
            assert all(any(np.array_equal(p, q) for q in prev) for p in plan.positions)
            prev = plan.positions

    def test_too_few_points(self, rng):
        with pytest.raises(ValueError):
            nets.forward(cloud(rng, 10), CFG, nets.init_encoder(CFG))

    def test_parameter_counts(self):
        cfg = nets.EncoderConfig()
        (t_cfg, t), (s_cfg, s) = nets.teacher_student_pair(cfg)
        assert s_cfg.dims == (4, 8, 16)
        def count(dims, classes=4):
            fan, total = 3, 0
            for d in dims:
                total += (fan + 3) * d + d
                fan = d
            return total + fan * fan + fan + fan * classes + classes

        assert t.num_values() == count(t_cfg.dims)
        assert s.num_values() == count(s_cfg.dims)
        # the hidden head layer is purely width x width
        assert t["enc.head.0.W"].data.size / s["enc.head.0.W"].data.size == 64
        assert t.num_values() / s.num_values() > 30

    def test_fps_seeds(self, rng):
        pos = rng.uniform(-1, 1, (128, 3))
        a = nets.plan_geometry(pos, CFG, seed=1)
        b = nets.plan_geometry(pos, CFG, seed=2)
        c = nets.plan_geometry(pos, CFG, seed=1)
        assert not np.array_equal(a[0].positions, b[0].positions)
        np.testing.assert_array_equal(a[0].positions, c[0].positions)

    def test_trainable(self):
        rng = np.random.default_rng(0)
        cfg = nets.EncoderConfig((8, 1), (8, 8), knn_group=4, num_classes=2)
        store = nets.init_encoder(cfg)
        base = rng.uniform(-1, 1, (24, 3))
        samples = [(PointCloud(base * 0.3 + [0.5 if y else -0.5, 0, 0]), y)
                   for y in (0, 1) for _ in range(3)]
        geos = [nets.plan_geometry(c.positions, cfg, 0) for c, _ in samples]

        def total():
            losses = [dc.softmax_cross_entropy(nets.forward(c, cfg, store, geometry=g).logits, y)
                      for (c, y), g in zip(samples, geos)]
            out = losses[0]
            for l in losses[1:]:
                out = dc.add(out, l)
            return out

        first = total().item()
        for _ in range(50):
            dc.backward(total())
            dc.adam_step(store, 0.01)
        assert total().item() < first
