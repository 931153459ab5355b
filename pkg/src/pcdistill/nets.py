"""Toy hierarchical point encoders used as teacher and student.

Each level samples centroids with FPS, groups nearest neighbors, applies one
shared pointwise layer to (neighbor feature, relative position) and max-pools
per group. A level with a single point is global: it is centered on the
centroid of the previous level and pools over all of its points.

Sampling depends only on positions and a seed, so it is planned separately
(``plan_geometry``) and can be cached per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .bkr import LevelFeature
from .errors import ConfigError
from .pointops import PointCloud, fps, knn


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class EncoderConfig:
    points_per_level: tuple = (64, 16, 1)
    dims_per_level: tuple = (32, 64, 128)
    knn_group: int = 8
    width_scale: float = 1.0
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "points_per_level", tuple(int(n) for n in self.points_per_level))
        object.__setattr__(self, "dims_per_level", tuple(int(d) for d in self.dims_per_level))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.points_per_level)

    @property
    def dims(self) -> tuple:
        return tuple(max(1, round(d * self.width_scale)) for d in self.dims_per_level)

    def validate(self):
        pts, dims = self.points_per_level, self.dims_per_level
        if not pts:
            raise ConfigError("encoder needs at least one level")
        if len(dims) != len(pts):
            raise ConfigError(f"{len(pts)} point counts but {len(dims)} dims")
        if any(n < 1 for n in pts) or any(b >= a for a, b in zip(pts, pts[1:])):
            raise ConfigError(f"points per level must be strictly decreasing: {pts}")
        if any(d < 1 for d in dims):
            raise ConfigError(f"dims must be positive: {dims}")
        if self.knn_group < 1:
            raise ConfigError("knn_group must be >= 1")
        if self.width_scale <= 0:
            raise ConfigError("width_scale must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")


@dataclass
class LevelPlan:
    positions: np.ndarray  # (n_out, 3)
    groups: np.ndarray  # (n_out, g) indices into the previous level
    is_global: bool


@dataclass
class ForwardTrace:
    levels: list
    logits: dc.Node
    geometry: list = field(default_factory=list)


def plan_level(pos_in: np.ndarray, n_out: int, knn_group: int, seed: int) -> LevelPlan:
    n_in = pos_in.shape[0]
    if n_out > n_in:
        raise ConfigError(f"cannot sample {n_out} centroids from {n_in} points")
    if n_out == 1 and n_in > 1:
        centroid = pos_in.mean(axis=0, keepdims=True)
        return LevelPlan(centroid, np.arange(n_in)[None, :], True)
    idx = fps(pos_in, n_out, seed)
    pos = pos_in[idx]
    groups = knn(pos, pos_in, min(knn_group, n_in)).indices
    return LevelPlan(pos, groups, n_out == 1)


def plan_geometry(positions: np.ndarray, cfg: EncoderConfig, seed: int) -> list:
    if positions.shape[0] < cfg.points_per_level[0]:
        raise ValueError(
            f"cloud has {positions.shape[0]} points, encoder needs {cfg.points_per_level[0]}"
        )
    plans, pos = [], positions
    for l, n_out in enumerate(cfg.points_per_level):
        plan = plan_level(pos, n_out, cfg.knn_group, derive_seed(seed, l))
        plans.append(plan)
        pos = plan.positions
    return plans


def init_encoder(cfg: EncoderConfig, store: dc.ParamStore | None = None, prefix: str = "enc"):
    store = dc.ParamStore() if store is None else store
    rng = np.random.default_rng(cfg.seed)
    d_in = 3
    for l, d in enumerate(cfg.dims):
        fan_in = d_in + 3
        store.add(f"{prefix}.sa.{l}.W", rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, d)))
        store.add(f"{prefix}.sa.{l}.b", np.zeros((1, d)))
        d_in = d
    hidden = d_in
    store.add(f"{prefix}.head.0.W", rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, hidden)))
    store.add(f"{prefix}.head.0.b", np.zeros((1, hidden)))
    store.add(
        f"{prefix}.head.1.W",
        rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, cfg.num_classes)),
    )
    store.add(f"{prefix}.head.1.b", np.zeros((1, cfg.num_classes)))
    return store


def apply_level(inp: LevelFeature, plan: LevelPlan, W: dc.Node, b: dc.Node) -> LevelFeature:
    n_out, g = plan.groups.shape
    rows = dc.gather_rows(inp.features, plan.groups.ravel())
    rel = (inp.positions[plan.groups] - plan.positions[:, None, :]).reshape(-1, 3)
    h = dc.relu(dc.linear(dc.concat_cols(rows, dc.const(rel)), W, b))
    return LevelFeature(inp.level + 1, plan.positions, dc.group_max(h, g), plan.is_global)


def sa_level(inp: LevelFeature, n_out: int, knn_group: int, W: dc.Node, b: dc.Node,
             seed: int) -> LevelFeature:
    """One set-abstraction level; ``W`` fixes the output width."""
    plan = plan_level(inp.positions, n_out, knn_group, seed)
    return apply_level(inp, plan, W, b)


def head(top: LevelFeature, store, prefix="enc") -> dc.Node:
    pooled = top.features if top.n == 1 else dc.reduce_max_rows(top.features)
    h = dc.relu(dc.linear(pooled, store[f"{prefix}.head.0.W"], store[f"{prefix}.head.0.b"]))
    return dc.linear(h, store[f"{prefix}.head.1.W"], store[f"{prefix}.head.1.b"])


def forward(cloud, cfg: EncoderConfig, store, seed: int = 0, geometry=None,
            prefix: str = "enc") -> ForwardTrace:
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, np.float64)
    if geometry is None:
        geometry = plan_geometry(pos, cfg, seed)
    cur = LevelFeature(0, pos, dc.const(pos))
    levels = []
    for l, plan in enumerate(geometry):
        cur = apply_level(cur, plan, store[f"{prefix}.sa.{l}.W"], store[f"{prefix}.sa.{l}.b"])
        levels.append(cur)
    return ForwardTrace(levels, head(cur, store, prefix), geometry)


def student_config(cfg: EncoderConfig, width_scale: float = 1 / 8, seed: int | None = None):
    return replace(cfg, width_scale=width_scale, seed=cfg.seed if seed is None else seed)


def teacher_student_pair(cfg: EncoderConfig, student_scale: float = 1 / 8,
                         student_seed: int | None = None):
    """Teacher at width 1 and student at ``student_scale``, each with fresh params."""
    t_cfg = replace(cfg, width_scale=1.0)
    s_cfg = student_config(t_cfg, student_scale, cfg.seed + 1 if student_seed is None else student_seed)
    return (t_cfg, init_encoder(t_cfg)), (s_cfg, init_encoder(s_cfg))
