from dataclasses import replace

import numpy as np
import pytest

from pcdistill import diffcore as dc
from pcdistill import nets
from pcdistill.errors import ConfigError
from pcdistill.harness import train as tr
from pcdistill.harness.ablate import HEADER, ablate
from pcdistill.harness.config import (
    DataConfig,
    DistillConfig,
    RunConfig,
    TrainConfig,
    dump_config,
    parse_config,
)
from pcdistill.harness.data import gen_dataset
from pcdistill.harness.metrics import metrics
from pcdistill.harness.reports import csv_text

SMALL = RunConfig(
    data=DataConfig(n_train=16, n_test=8, points=32),
    encoder=nets.EncoderConfig((16, 4, 1), (8, 16, 32), knn_group=4),
    student_scale=0.25,
    teacher=TrainConfig(epochs=2, batch_size=8),
    distill=DistillConfig(epochs=2, batch_size=8),
)


@pytest.fixture(scope="module")
def small_teacher():
    store, report = tr.pretrain_teacher(SMALL)
    assert report.status == "ok"
    return store


def with_distill(cfg, **kw):
    return replace(cfg, distill=replace(cfg.distill, **kw))


class TestConfig:
    def test_round_trip(self):
        cfg = with_distill(SMALL, mode="tdkr_fmd", tau=0.3, shared_fps=True)
        assert parse_config(dump_config(cfg)) == cfg

    def test_defaults_and_comments(self):
        cfg = parse_config("# comment\n\ndistill.lambda = 0.5  # trailing\nfmd.k = 3\nfmd.tau = adaptive\n")
        assert cfg.distill.lam == 0.5 and cfg.distill.k == 3 and cfg.distill.tau is None
        assert cfg.data == DataConfig()

    @pytest.mark.parametrize("text, needle", [
        ("fmd.kk = 3", "line 1: unknown key 'fmd.kk'"),
        ("\nfmd.k = three", "line 2: bad value for 'fmd.k'"),
        ("fmd.k", "line 1: expected"),
        ("encoder.levels = 2", "encoder.levels = 2"),
        ("distill.lambda = -1", "lambda"),
        ("fmd.k = 0", "fmd.k"),
        ("distill.mode = magic", "distill.mode"),
        ("encoder.dims = 8,16", "dims"),
        ("data.points = 10", "data.points"),
    ])
    def test_errors(self, text, needle):
        with pytest.raises(ConfigError, match=None) as exc:
            parse_config(text)
        assert needle in str(exc.value)

    def test_shared_fps(self):
        assert with_distill(SMALL, shared_fps=True).student_fps_seed == SMALL.teacher_fps_seed
        assert SMALL.student_fps_seed != SMALL.teacher_fps_seed


class TestData:
    def test_sphere_radius(self):
        data = gen_dataset(4, 0, 64, 0.0, seed=3)
        sphere = next(s for s in data.train if s.label == 0)
        r = np.linalg.norm(sphere.denormalized(), axis=1)
        np.testing.assert_allclose(r, sphere.shape_params["r"], atol=1e-9)

    def test_balanced_and_normalized(self):
        data = gen_dataset(40, 20, 50, 0.02, seed=1)
        assert np.bincount([s.label for s in data.train]).tolist() == [10] * 4
        assert all(np.abs(s.cloud.positions).max() <= 1.0 for s in data.train + data.test)

    def test_deterministic(self):
        a = gen_dataset(8, 4, 32, 0.02, seed=9, rotate="full")
        b = gen_dataset(8, 4, 32, 0.02, seed=9, rotate="full")
        for x, y in zip(a.train + a.test, b.train + b.test):
            assert x.cloud.positions.tobytes() == y.cloud.positions.tobytes()

    def test_flat_faces(self):
        cube = next(s for s in gen_dataset(4, 0, 200, 0.0, seed=2).train if s.label == 1)
        pts = cube.denormalized()
        h = np.array([cube.shape_params[k] for k in "abc"])
        on_face = np.isclose(np.abs(pts), h, atol=1e-12).any(axis=1)
        assert on_face.all()


class TestMetrics:
    def test_all_correct(self):
        m = metrics([0, 1, 2, 1], [0, 1, 2, 1])
        assert m.oa == m.macc == 100.0

    def test_hand_case(self):
        m = metrics([0] * 40, [0] * 10 + [1] * 30)
        assert (m.oa, m.macc) == (25.0, 50.0)
        assert m.confusion.sum(axis=1).tolist() == [10, 30]

    def test_permutation(self, rng):
        p, l = rng.integers(0, 3, 30), rng.integers(0, 3, 30)
        perm = rng.permutation(30)
        a, b = metrics(p, l, 3), metrics(p[perm], l[perm], 3)
        assert (a.oa, a.macc) == (b.oa, b.macc)

    def test_absent_class(self):
        m = metrics([0, 2, 2], [0, 2, 0], num_classes=3)
        assert m.absent_classes == (1,)
        assert m.macc == pytest.approx(75.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            metrics([0, 1], [0])


class TestTraining:
    def test_teacher_report_and_checkpoint(self, small_teacher, tmp_path):
        m = tr.evaluate_teacher(SMALL, small_teacher)
        dc.save_params(small_teacher, tmp_path / "t.pdkp")
        again = tr.evaluate_teacher(SMALL, dc.load_params(tmp_path / "t.pdkp"))
        assert m.oa == again.oa and np.array_equal(m.confusion, again.confusion)
        assert 0 <= m.oa <= 100
        assert m.confusion.sum(axis=1).tolist() == [2, 2, 2, 2]

    def test_lambda_zero_matches_plain(self, small_teacher):
        cfg = with_distill(SMALL, lam=0.0, mode="bkr_fmd")
        student, _, rep = tr.distill(cfg, small_teacher)
        plain, plain_rep = tr.train_student_plain(cfg)
        for name, p in plain:
            np.testing.assert_array_equal(student[name].data, p.data)
        assert rep.oa == plain_rep.oa
        assert [e.ce for e in rep.epochs] == [e.ce for e in plain_rep.epochs]

    @pytest.mark.parametrize("mode", ["fl2", "remd", "fmd", "bkr_fmd"])
    def test_loss_decomposition_and_freezing(self, small_teacher, mode):
        before = small_teacher.snapshot()
        cfg = with_distill(SMALL, mode=mode, lam=0.3)
        _, _, rep = tr.distill(cfg, small_teacher)
        assert rep.status == "ok"
        for total, ce, dist in rep.batches:
            assert abs(total - (ce + 0.3 * dist)) <= 1e-9
        for name, value in before.items():
            assert small_teacher[name].data.tobytes() == value.tobytes()

    def test_seed_completeness(self, small_teacher):
        cfg = with_distill(SMALL, mode="tdkr_bukr_fmd")
        a = tr.distill(cfg, small_teacher)
        b = tr.distill(cfg, small_teacher)
        assert dc.encode_params(a[0]) == dc.encode_params(b[0])
        assert dc.encode_params(a[1]) == dc.encode_params(b[1])
        assert a[2].batches == b[2].batches and a[2].oa == b[2].oa

    def test_aligned_identity(self, small_teacher):
        cfg = replace(with_distill(SMALL, mode="fmd", k=1, shared_fps=True,
                                   init_seed=SMALL.encoder.seed),
                      student_scale=1.0)
        setup = tr.prepare_distill(cfg, small_teacher)
        for name, p in small_teacher:
            setup.student[name].data[:] = p.data
        for l, d in enumerate(setup.t_cfg.dims):
            setup.bkr[f"bkr.proj.{l}.W"].data[:] = np.eye(d)
            setup.bkr[f"bkr.proj.{l}.b"].data[:] = 0.0
        total = 0.0
        for i, sample in enumerate(setup.data.train):
            trace = nets.forward(sample.cloud, setup.s_cfg, setup.student, geometry=setup.s_geo[i])
            losses = tr.level_losses("fmd", trace.levels, setup.views[i], setup.t_cfg.dims,
                                     setup.bkr, cfg.distill, setup.plans[i])
            total += sum(x.item() for x in losses)
        assert total == 0.0

    def test_dry_run_and_mismatch(self, small_teacher):
        assert len(tr.dry_run(SMALL, small_teacher)) == 3
        other = replace(SMALL, encoder=nets.EncoderConfig((16, 4, 1), (8, 16, 64), knn_group=4))
        with pytest.raises(ConfigError):
            tr.dry_run(other, small_teacher)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self, small_teacher):
        cfg = with_distill(SMALL, lr=1e200, optimizer="sgd", lam=1e200)
        _, _, rep = tr.distill(cfg, small_teacher)
        assert rep.status == "failed" and "non-finite" in rep.error


class TestAblate:
    def test_single_cell(self, small_teacher):
        rows = ablate(SMALL, small_teacher, ["fl2"], [0], timing=False)
        assert len(rows) == 2
        assert rows[0][:3] == ["fl2", 0, "ok"]
        assert rows[1][1] == "summary" and rows[1][3] == rows[0][3]

    def test_repeatable_csv(self, small_teacher):
        a = csv_text(HEADER, ablate(SMALL, small_teacher, ["fmd", "remd"], [0, 1], timing=False))
        b = csv_text(HEADER, ablate(SMALL, small_teacher, ["fmd", "remd"], [0, 1], timing=False))
        assert a == b
        assert a.count("\n") == 1 + 4 + 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failed_cell_recorded(self, small_teacher):
        cfg = with_distill(SMALL, lr=1e200, optimizer="sgd", lam=1e200)
        rows = ablate(cfg, small_teacher, ["fl2", "fmd"], [0], timing=False)
        assert all(r[2].startswith("failed") for r in rows)
        assert len(rows) == 4


def test_default_teacher_accuracy():
    store, report = tr.pretrain_teacher(RunConfig())
    assert report.status == "ok"
    assert all(np.isfinite(e.total) for e in report.epochs)
    assert report.oa >= 95.0
