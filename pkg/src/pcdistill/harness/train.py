"""Teacher pretraining and student distillation loops.

Sampling geometry depends only on a cloud and a seed, so it is planned once
per sample and reused every epoch. The teacher is frozen, which lets its
per-level features be computed once as well.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .. import diffcore as dc
from .. import nets
from ..bkr import MODES, init_bkr_params, reconfigure
from ..errors import ConfigError, NumericError
from ..ot import fl2_loss, fmd_loss, fmd_plan, remd_loss
from .config import RunConfig
from .data import Dataset, dataset_from_config
from .metrics import metrics

log = logging.getLogger(__name__)

TRAIN_SPLIT, TEST_SPLIT = 0, 1


@dataclass
class EpochStats:
    epoch: int
    total: float
    ce: float
    distill: float


@dataclass
class RunReport:
    name: str
    epochs: list = field(default_factory=list)
    batches: list = field(default_factory=list)  # (total, ce, distill_sum) per batch
    oa: float = float("nan")
    macc: float = float("nan")
    confusion: np.ndarray | None = None
    absent_classes: tuple = ()
    wall_time: float = 0.0
    status: str = "ok"
    error: str = ""


@dataclass
class TeacherView:
    """Frozen teacher outputs for one sample: per-level positions and features."""

    positions: list
    features: list


def plan_split(samples, cfg: nets.EncoderConfig, role_seed: int, split: int):
    return [
        nets.plan_geometry(s.cloud.positions, cfg, nets.derive_seed(role_seed, split, i))
        for i, s in enumerate(samples)
    ]


def _step(store: dc.ParamStore, optimizer: str, lr: float):
    if optimizer == "adam":
        dc.adam_step(store, lr)
    else:
        dc.sgd_step(store, lr)


def predict(samples, cfg, store, geometry) -> np.ndarray:
    preds = []
    for s, geo in zip(samples, geometry):
        trace = nets.forward(s.cloud, cfg, store, geometry=geo)
        preds.append(int(np.argmax(trace.logits.data[0])))
    return np.array(preds, dtype=np.int64)


def evaluate(samples, cfg, store, geometry, report: RunReport | None = None):
    m = metrics(predict(samples, cfg, store, geometry), [s.label for s in samples],
                cfg.num_classes)
    if report is not None:
        report.oa, report.macc, report.confusion = m.oa, m.macc, m.confusion
        report.absent_classes = m.absent_classes
    return m


def _fit(n_items, item_loss, stores, train_cfg, shuffle_seed, report):
    """Mini-batch loop; ``item_loss(i)`` returns (total, ce, distill) nodes."""
    for epoch in range(train_cfg.epochs):
        rng = np.random.default_rng(nets.derive_seed(shuffle_seed, epoch))
        order = rng.permutation(n_items)
        sums = np.zeros(3)
        for start in range(0, n_items, train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            acc = np.zeros(3)
            for i in batch:
                total, ce, dist = item_loss(int(i))
                dc.backward(dc.scale(total, 1.0 / len(batch)))
                acc += (total.item(), ce.item(), dist)
            acc /= len(batch)
            if not np.all(np.isfinite(acc)):
                raise NumericError(f"non-finite loss in epoch {epoch}")
            report.batches.append(tuple(acc))
            sums += acc * len(batch)
            for store in stores:
                _step(store, train_cfg.optimizer, train_cfg.lr)
        mean = sums / n_items
        report.epochs.append(EpochStats(epoch, *mean))
        log.info("%s epoch %d: total=%.4f ce=%.4f distill=%.4f", report.name, epoch, *mean)


def train_classifier(samples, cfg: nets.EncoderConfig, train_cfg, geometry,
                     name="classifier", store=None):
    """Cross-entropy training of one encoder; returns (params, report)."""
    store = nets.init_encoder(cfg) if store is None else store
    report = RunReport(name)
    t0 = time.perf_counter()

    def item_loss(i):
        trace = nets.forward(samples[i].cloud, cfg, store, geometry=geometry[i])
        ce = dc.softmax_cross_entropy(trace.logits, samples[i].label)
        return ce, ce, 0.0

    try:
        _fit(len(samples), item_loss, [store], train_cfg, cfg.seed, report)
    except NumericError as exc:
        report.status, report.error = "failed", str(exc)
    report.wall_time = time.perf_counter() - t0
    return store, report


def pretrain_teacher(cfg: RunConfig, dataset: Dataset | None = None):
    cfg.validate()
    data = dataset_from_config(cfg.data, cfg.encoder.num_classes) if dataset is None else dataset
    t_cfg = cfg.teacher_encoder
    geo = plan_split(data.train, t_cfg, cfg.teacher_fps_seed, TRAIN_SPLIT)
    store, report = train_classifier(data.train, t_cfg, cfg.teacher, geo, name="teacher")
    if report.status == "ok":
        test_geo = plan_split(data.test, t_cfg, cfg.teacher_fps_seed, TEST_SPLIT)
        evaluate(data.test, t_cfg, store, test_geo, report)
    return store, report


def evaluate_teacher(cfg: RunConfig, store, dataset: Dataset | None = None):
    data = dataset_from_config(cfg.data, cfg.encoder.num_classes) if dataset is None else dataset
    t_cfg = cfg.teacher_encoder
    geo = plan_split(data.test, t_cfg, cfg.teacher_fps_seed, TEST_SPLIT)
    return evaluate(data.test, t_cfg, store, geo)


# --- distillation ------------------------------------------------------------


def teacher_views(samples, t_cfg, teacher_store, geometry):
    views = []
    for s, geo in zip(samples, geometry):
        trace = nets.forward(s.cloud, t_cfg, teacher_store, geometry=geo)
        views.append(TeacherView([lf.positions for lf in trace.levels],
                                 [lf.features.data for lf in trace.levels]))
    return views


def level_losses(mode: str, levels, view: TeacherView, teacher_dims, bkr_store, dcfg,
                 plans=None):
    """Per-level distillation losses (nodes) for one sample under ``mode``."""
    kind, variant = MODES[mode]
    if kind == "fl2":
        return [
            fl2_loss(lf.features, view.features[l], bkr_store[f"bkr.proj.{l}.W"],
                     bkr_store[f"bkr.proj.{l}.b"])
            for l, lf in enumerate(levels)
        ]
    out = reconfigure(levels, teacher_dims, bkr_store, variant).out
    losses = []
    for l, (lf, F_r) in enumerate(zip(levels, out)):
        F_t, pos_t = view.features[l], view.positions[l]
        if kind == "remd":
            losses.append(remd_loss(F_r, F_t))
            continue
        plan = None if plans is None else plans[l]
        k = min(dcfg.k, pos_t.shape[0])
        losses.append(fmd_loss(F_r, lf.positions, F_t, pos_t, k=k, tau=dcfg.tau,
                               normalize_apc=dcfg.normalize_apc, plan=plan,
                               apc_grad=dcfg.apc_grad))
    return losses


def fmd_plans(student_geo, views, dcfg):
    out = []
    for geo, view in zip(student_geo, views):
        plans = []
        for plan, pos_t in zip(geo, view.positions):
            plans.append(fmd_plan(plan.positions, pos_t, min(dcfg.k, pos_t.shape[0]), dcfg.tau))
        out.append(plans)
    return out


@dataclass
class DistillSetup:
    data: Dataset
    s_cfg: nets.EncoderConfig
    t_cfg: nets.EncoderConfig
    student: dc.ParamStore
    bkr: dc.ParamStore
    views: list
    s_geo: list
    plans: list | None


def prepare_distill(cfg: RunConfig, teacher_store: dc.ParamStore,
                    dataset: Dataset | None = None) -> DistillSetup:
    cfg.validate()
    data = dataset_from_config(cfg.data, cfg.encoder.num_classes) if dataset is None else dataset
    t_cfg, s_cfg = cfg.teacher_encoder, cfg.student_encoder
    check_teacher_params(teacher_store, t_cfg)
    frozen = teacher_store.copy()
    frozen.freeze()
    t_geo = plan_split(data.train, t_cfg, cfg.teacher_fps_seed, TRAIN_SPLIT)
    s_geo = plan_split(data.train, s_cfg, cfg.student_fps_seed, TRAIN_SPLIT)
    views = teacher_views(data.train, t_cfg, frozen, t_geo)
    student = nets.init_encoder(s_cfg)
    bkr_store = init_bkr_params(dc.ParamStore(), s_cfg.dims, t_cfg.dims,
                                seed=nets.derive_seed(cfg.distill.init_seed, 7))
    kind = MODES[cfg.distill.mode][0]
    plans = fmd_plans(s_geo, views, cfg.distill) if kind == "fmd" else None
    return DistillSetup(data, s_cfg, t_cfg, student, bkr_store, views, s_geo, plans)


def check_teacher_params(store: dc.ParamStore, t_cfg: nets.EncoderConfig):
    expected = nets.init_encoder(t_cfg)
    for name, p in expected:
        if name not in store:
            raise ConfigError(f"teacher checkpoint lacks parameter {name!r}")
        if store[name].shape != p.shape:
            raise ConfigError(
                f"teacher parameter {name!r} has shape {store[name].shape}, config implies {p.shape}"
            )


def dry_run(cfg: RunConfig, teacher_store: dc.ParamStore | None = None):
    """Shape-check one sample through teacher, student, reconfiguration and loss."""
    cfg.validate()
    small = type(cfg.data)(**{**cfg.data.__dict__, "n_train": 1, "n_test": 1})
    data = dataset_from_config(small, cfg.encoder.num_classes)
    t_cfg, s_cfg = cfg.teacher_encoder, cfg.student_encoder
    if teacher_store is None:
        teacher_store = nets.init_encoder(t_cfg)
    setup = prepare_distill(cfg, teacher_store, data)
    trace = nets.forward(data.train[0].cloud, s_cfg, setup.student, geometry=setup.s_geo[0])
    view = setup.views[0]
    for l, (lf, F_t) in enumerate(zip(trace.levels, view.features)):
        if lf.n != F_t.shape[0]:
            raise ConfigError(f"level {l}: student has {lf.n} points, teacher {F_t.shape[0]}")
    losses = level_losses(cfg.distill.mode, trace.levels, view, t_cfg.dims, setup.bkr,
                          cfg.distill, setup.plans[0] if setup.plans else None)
    out = reconfigure(trace.levels, t_cfg.dims, setup.bkr,
                      MODES[cfg.distill.mode][1]).out
    for l, (node, F_t) in enumerate(zip(out, view.features)):
        if node.shape[1] != F_t.shape[1]:
            raise ConfigError(f"level {l}: reconfigured dim {node.shape[1]} != {F_t.shape[1]}")
    return [float(x.item()) for x in losses]


def distill(cfg: RunConfig, teacher_store: dc.ParamStore, dataset: Dataset | None = None,
            setup: DistillSetup | None = None):
    """Train the student with CE + lambda * sum of level losses.

    Returns ``(student params, bkr params, report)``; the teacher store is not
    modified.
    """
    t0 = time.perf_counter()
    if setup is None:
        setup = prepare_distill(cfg, teacher_store, dataset)
    dcfg = cfg.distill
    data, s_cfg = setup.data, setup.s_cfg
    teacher_dims = setup.t_cfg.dims
    report = RunReport(f"distill-{dcfg.mode}")

    def item_loss(i):
        sample = data.train[i]
        trace = nets.forward(sample.cloud, s_cfg, setup.student, geometry=setup.s_geo[i])
        ce = dc.softmax_cross_entropy(trace.logits, sample.label)
        losses = level_losses(dcfg.mode, trace.levels, setup.views[i], teacher_dims,
                              setup.bkr, dcfg, setup.plans[i] if setup.plans else None)
        dist = losses[0]
        for node in losses[1:]:
            dist = dc.add(dist, node)
        total = dc.add(ce, dc.scale(dist, dcfg.lam))
        return total, ce, dist.item()

    try:
        _fit(len(data.train), item_loss, [setup.student, setup.bkr], dcfg,
             dcfg.init_seed, report)
    except NumericError as exc:
        report.status, report.error = "failed", str(exc)
    if report.status == "ok":
        test_geo = plan_split(data.test, s_cfg, cfg.student_fps_seed, TEST_SPLIT)
        evaluate(data.test, s_cfg, setup.student, test_geo, report)
    report.wall_time = time.perf_counter() - t0
    return setup.student, setup.bkr, report


def train_student_plain(cfg: RunConfig, dataset: Dataset | None = None):
    """Student trained on cross-entropy alone with the distillation seeds."""
    data = dataset_from_config(cfg.data, cfg.encoder.num_classes) if dataset is None else dataset
    s_cfg = cfg.student_encoder
    geo = plan_split(data.train, s_cfg, cfg.student_fps_seed, TRAIN_SPLIT)
    store, report = train_classifier(data.train, s_cfg, cfg.distill, geo, name="student")
    test_geo = plan_split(data.test, s_cfg, cfg.student_fps_seed, TEST_SPLIT)
    evaluate(data.test, s_cfg, store, test_geo, report)
    return store, report


__all__ = [
    "RunReport",
    "EpochStats",
    "pretrain_teacher",
    "distill",
    "dry_run",
    "evaluate_teacher",
    "train_student_plain",
]
