import numpy as np
import pytest

from pcdistill import diffcore as dc
from pcdistill.bkr import (
    MODES,
    LevelFeature,
    Variant,
    bukr,
    gate_fuse,
    init_bkr_params,
    project,
    reconfigure,
    tdkr,
)
from pcdistill.errors import ConfigError, ShapeError
from pcdistill.ot import fmd_loss
from pcdistill.pointops import fps


def make_stack(rng, counts=(12, 5, 1), dims=(2, 3, 4), leaf=dc.param):
    """Student levels whose positions form an FPS subset chain; a count of 1 is global."""
    pos = rng.uniform(-1, 1, (counts[0] * 2, 3))
    levels = []
    for l, (n, d) in enumerate(zip(counts, dims)):
        if n == 1 and len(pos) > 1:
            pos = pos.mean(axis=0, keepdims=True)
            is_global = True
        else:
            pos = pos[fps(pos, n, seed=l)]
            is_global = False
        levels.append(LevelFeature(l + 1, pos, leaf(rng.normal(size=(n, d))), is_global))
    return levels


def test_level_feature_shape_check():
    with pytest.raises(ShapeError):
        LevelFeature(1, np.zeros((3, 3)), dc.const(np.zeros((2, 2))))


class TestGateFuse:
    def test_saturated(self, rng):
        x, y = dc.const(rng.normal(size=(4, 3))), dc.const(rng.normal(size=(4, 3)))
        out = gate_fuse(x, y, dc.const(np.zeros((6, 2))), dc.const([[50.0, 50.0]]))
        np.testing.assert_allclose(out.data, x.data + y.data, atol=1e-12)

    def test_zero_weights_half_half(self, rng):
        x, y = dc.const(rng.normal(size=(4, 3))), dc.const(rng.normal(size=(4, 3)))
        out = gate_fuse(x, y, dc.const(np.zeros((6, 2))), dc.const(np.zeros((1, 2))))
        np.testing.assert_allclose(out.data, 0.5 * x.data + 0.5 * y.data, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gate_fuse(dc.const(np.zeros((2, 3))), dc.const(np.zeros((2, 2))),
                      dc.const(np.zeros((5, 2))), dc.const(np.zeros((1, 2))))

    def test_gates_in_open_interval(self, rng):
        # recover per-point gates from two probes with x = e_c, y = 0 and x = 0, y = e_c
        x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        W, b = rng.normal(size=(4, 2)) * 3, rng.normal(size=(1, 2))
        out = gate_fuse(dc.const(x), dc.const(y), dc.const(W), dc.const(b)).data
        g = 1 / (1 + np.exp(-(np.hstack([x, y]) @ W + b)))
        assert np.all((g > 0) & (g < 1))
        np.testing.assert_allclose(out, g[:, :1] * x + g[:, 1:] * y, atol=1e-14)

    def test_gradient(self):
        worst = 0.0
        for trial in range(20):
            rng = np.random.default_rng(trial)
            x, y = dc.param(rng.normal(size=(5, 3))), dc.param(rng.normal(size=(5, 3)))
            W, b = dc.param(rng.normal(size=(6, 2))), dc.param(rng.normal(size=(1, 2)))
            target = rng.normal(size=(5, 3))
            f = lambda: dc.sum_all(dc.hadamard(gate_fuse(x, y, W, b), dc.const(target)))
            worst = max(worst, dc.grad_check(f, [x, y, W, b]))
        assert worst <= 1e-4


class TestPasses:
    teacher_dims = (5, 6, 7)

    def _setup(self, rng, counts=(12, 5, 1), dims=(2, 3, 4)):
        student = make_stack(rng, counts, dims)
        store = init_bkr_params(dc.ParamStore(), dims, self.teacher_dims[: len(dims)], seed=1)
        return student, store

    def test_single_level(self, rng):
        student, store = self._setup(rng, (6,), (2,))
        td = tdkr(student, (5,), store)
        expected = dc.linear(student[0].features, store["bkr.td.top.W"], store["bkr.td.top.b"])
        np.testing.assert_array_equal(td[0].data, expected.data)
        bu = bukr(td, student, store)
        base = dc.linear(td[0], store["bkr.bu.base.W"], store["bkr.bu.base.b"])
        np.testing.assert_array_equal(bu[0].data, base.data)

    def test_global_top_repeats(self, rng):
        student, store = self._setup(rng, (6, 1), (2, 3))
        td = tdkr(student, (5, 6), store)
        up = dc.linear(dc.const(np.repeat(td[1].data, 6, axis=0)),
                       store["bkr.td.up.0.W"], store["bkr.td.up.0.b"])
        feat = dc.linear(student[0].features, store["bkr.td.feat.0.W"], store["bkr.td.feat.0.b"])
        fused = gate_fuse(feat, up, store["bkr.td.gate.0.W"], store["bkr.td.gate.0.b"])
        np.testing.assert_allclose(td[0].data, fused.data, atol=1e-15)

    def test_output_dims(self, rng):
        student, store = self._setup(rng)
        stack = reconfigure(student, self.teacher_dims, store)
        for lf, td, bu, out, d in zip(student, stack.td, stack.bu, stack.out, self.teacher_dims):
            assert td.shape == bu.shape == out.shape == (lf.n, d)

    def test_gradient_reaches_every_level(self, rng):
        student, store = self._setup(rng)
        bu = bukr(tdkr(student, self.teacher_dims, store), student, store)
        dc.backward(dc.sum_squares(bu[-1]))
        for lf in student:
            assert np.any(lf.features.grad != 0)

    def test_config_errors(self, rng):
        student, store = self._setup(rng)
        with pytest.raises(ConfigError):
            tdkr(student[:2], self.teacher_dims, store)
        with pytest.raises(ConfigError):
            reconfigure(student, (5, 6, 8), store)
        with pytest.raises(ConfigError):
            init_bkr_params(dc.ParamStore(), (2, 3), (5,))


class TestReconfigure:
    teacher_dims = (5, 6, 7)

    def _setup(self, rng):
        student = make_stack(rng)
        return student, init_bkr_params(dc.ParamStore(), (2, 3, 4), self.teacher_dims, seed=4)

    def test_zero_params_leave_projection(self, rng):
        student, store = self._setup(rng)
        for name, p in store:
            if not name.startswith("bkr.proj."):
                p.data[:] = 0.0
        stack = reconfigure(student, self.teacher_dims, store)
        for out, p in zip(stack.out, project(student, store)):
            np.testing.assert_allclose(out.data, p.data, atol=1e-15)

    def test_variants(self, rng):
        student, store = self._setup(rng)
        proj = project(student, store)
        td = tdkr(student, self.teacher_dims, store)
        bu = bukr(td, student, store)
        cases = {
            "fmd": proj,
            "tdkr_fmd": td,
            "tdkr_bukr_fmd": bu,
            "bukr_fmd": bukr(proj, student, store),
            "bkr_fmd": [dc.add(b, p) for b, p in zip(bu, proj)],
        }
        for mode, expected in cases.items():
            out = reconfigure(student, self.teacher_dims, store, MODES[mode][1]).out
            for o, e in zip(out, expected):
                np.testing.assert_array_equal(o.data, e.data)

    def test_row_counts_follow_student(self, rng):
        student, store = self._setup(rng)
        for variant in {v for _, v in MODES.values()}:
            out = reconfigure(student, self.teacher_dims, store, variant).out
            assert [o.shape[0] for o in out] == [lf.n for lf in student]

    def test_end_to_end_grad_check(self):
        worst = 0.0
        for trial in range(4):
            rng = np.random.default_rng(100 + trial)
            student = make_stack(rng, (8, 3), (2, 3), leaf=dc.const)
            store = init_bkr_params(dc.ParamStore(), (2, 3), (3, 4), seed=trial)
            teacher = [(lf.positions + rng.normal(0, 0.05, lf.positions.shape),
                        rng.normal(size=(lf.n, d)) + 1.0) for lf, d in zip(student, (3, 4))]

            def f():
                out = reconfigure(student, (3, 4), store).out
                total = None
                for o, lf, (pt, ft) in zip(out, student, teacher):
                    term = fmd_loss(o, lf.positions, ft, pt, k=2)
                    total = term if total is None else dc.add(total, term)
                return total

            worst = max(worst, dc.grad_check(f, [p for _, p in store]))
        assert worst <= 1e-4
