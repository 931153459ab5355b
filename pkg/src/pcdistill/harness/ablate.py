"""Mode x seed ablation matrix over distillation variants."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .. import nets
from .config import RunConfig
from .data import dataset_from_config
from .train import distill

log = logging.getLogger(__name__)

HEADER = [
    "mode", "seed", "status", "oa", "macc", "oa_std", "macc_std",
    "loss_total", "loss_ce", "loss_distill", "wall_time_s",
]


def seeded(cfg: RunConfig, mode: str, seed: int) -> RunConfig:
    """Config for one cell: ``seed`` sets the student init and student FPS seeds."""
    d = replace(
        cfg.distill,
        mode=mode,
        init_seed=seed,
        student_fps_seed=nets.derive_seed(cfg.distill.student_fps_seed, seed),
    )
    return replace(cfg, distill=d)


def _run_cell(args):
    cfg, teacher_store, dataset, mode, seed, timing = args
    try:
        _, _, rep = distill(seeded(cfg, mode, seed), teacher_store, dataset)
    except Exception as exc:  # a failed cell must not stop the matrix
        log.exception("ablation cell %s/%s failed", mode, seed)
        return [mode, seed, f"failed: {exc}", "", "", "", "", "", "", "", ""]
    if rep.status != "ok":
        return [mode, seed, f"failed: {rep.error}", "", "", "", "", "", "", "", ""]
    last = rep.epochs[-1]
    return [
        mode, seed, "ok", float(rep.oa), float(rep.macc), "", "",
        float(last.total), float(last.ce), float(last.distill),
        float(rep.wall_time) if timing else 0.0,
    ]


def ablate(cfg: RunConfig, teacher_store, modes, seeds, dataset=None, timing=True, jobs=1):
    """Run every (mode, seed) cell; returns CSV rows including per-mode summaries."""
    cfg.validate()
    if dataset is None:
        dataset = dataset_from_config(cfg.data, cfg.encoder.num_classes)
    cells = [(cfg, teacher_store, dataset, m, s, timing) for m in modes for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]

    summary = []
    for mode in modes:
        ok = [r for r in rows if r[0] == mode and r[2] == "ok"]
        if not ok:
            summary.append([mode, "summary", "failed", "", "", "", "", "", "", "", ""])
            continue
        oa = np.array([r[3] for r in ok])
        macc = np.array([r[4] for r in ok])
        wall = float(np.sum([r[10] for r in ok]))
        summary.append([
            mode, "summary", f"ok ({len(ok)}/{len(seeds)})",
            float(oa.mean()), float(macc.mean()), float(oa.std()), float(macc.std()),
            float(np.mean([r[7] for r in ok])), float(np.mean([r[8] for r in ok])),
            float(np.mean([r[9] for r in ok])), wall,
        ])
    return rows + summary


def mode_means(rows) -> dict:
    return {r[0]: r[3] for r in rows if r[1] == "summary" and r[3] != ""}
