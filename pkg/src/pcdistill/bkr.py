"""Bidirectional knowledge reconfiguration of student features.

A top-down pass spreads coarse-level information to fine levels, a bottom-up
pass carries it back up, and a residual adds the (projected) student feature
at each level. Every output lives in the teacher's feature dimension at the
student's positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ShapeError
from .pointops import interp_weights, nearest_index

GATE_INIT_STD = 0.01


@dataclass
class LevelFeature:
    level: int
    positions: np.ndarray
    features: dc.Node
    is_global: bool = False

    def __post_init__(self):
        if self.positions.shape[0] != self.features.shape[0]:
            raise ShapeError(
                f"level {self.level}: {self.positions.shape[0]} positions, "
                f"{self.features.shape[0]} feature rows"
            )

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ReconfiguredStack:
    td: list
    bu: list
    out: list


@dataclass(frozen=True)
class Variant:
    tdkr: bool
    bukr: bool
    residual: bool


# Table-5 style ablation rows: (level loss, reconfiguration switches)
MODES = {
    "fl2": ("fl2", Variant(False, False, False)),
    "remd": ("remd", Variant(False, False, False)),
    "fmd": ("fmd", Variant(False, False, False)),
    "tdkr_fmd": ("fmd", Variant(True, False, False)),
    "bukr_fmd": ("fmd", Variant(False, True, False)),
    "tdkr_bukr_fmd": ("fmd", Variant(True, True, False)),
    "bkr_fmd": ("fmd", Variant(True, True, True)),
}
FULL = Variant(True, True, True)


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def _add_linear(store, name, fan_in, fan_out, rng, std=None):
    w = _glorot(rng, fan_in, fan_out) if std is None else rng.normal(0.0, std, (fan_in, fan_out))
    store.add(f"{name}.W", w)
    store.add(f"{name}.b", np.zeros((1, fan_out)))


def init_bkr_params(store: dc.ParamStore, student_dims, teacher_dims, seed: int = 0,
                    prefix: str = "bkr"):
    """Per-level projection and gate parameters for all three components."""
    if len(student_dims) != len(teacher_dims) or not student_dims:
        raise ConfigError(
            f"student has {len(student_dims)} levels, teacher has {len(teacher_dims)}"
        )
    rng = np.random.default_rng(seed)
    L = len(teacher_dims)
    for l in range(L):
        ds, dt = student_dims[l], teacher_dims[l]
        _add_linear(store, f"{prefix}.proj.{l}", ds, dt, rng)
        if l == L - 1:
            _add_linear(store, f"{prefix}.td.top", ds, dt, rng)
        else:
            _add_linear(store, f"{prefix}.td.feat.{l}", ds, dt, rng)
            _add_linear(store, f"{prefix}.td.up.{l}", teacher_dims[l + 1], dt, rng)
            _add_linear(store, f"{prefix}.td.gate.{l}", 2 * dt, 2, rng, std=GATE_INIT_STD)
        if l == 0:
            _add_linear(store, f"{prefix}.bu.base", dt, dt, rng)
        else:
            _add_linear(store, f"{prefix}.bu.td.{l}", dt, dt, rng)
            _add_linear(store, f"{prefix}.bu.down.{l}", teacher_dims[l - 1], dt, rng)
            _add_linear(store, f"{prefix}.bu.gate.{l}", 2 * dt, 2, rng, std=GATE_INIT_STD)
    return store


def _lin(x, store, name):
    return dc.linear(x, store[f"{name}.W"], store[f"{name}.b"])


def gate_fuse(x: dc.Node, y: dc.Node, W: dc.Node, b: dc.Node) -> dc.Node:
    """Per-point gated sum g1 * x + g2 * y, gates from a 1x1 map of [x, y]."""
    if x.shape != y.shape:
        raise ShapeError(f"gate_fuse: {x.shape} vs {y.shape}")
    w = dc.sigmoid(dc.linear(dc.concat_cols(x, y), W, b))
    g1 = dc.slice_cols(w, 0, 1)
    g2 = dc.slice_cols(w, 1, 2)
    return dc.add(dc.colscale(x, g1), dc.colscale(y, g2))


def upsample(node: dc.Node, src: LevelFeature, dst_positions) -> dc.Node:
    if src.is_global or src.n == 1:
        return dc.gather_rows(node, np.zeros(len(dst_positions), dtype=np.int64))
    idx, w = interp_weights(src.positions, dst_positions)
    return dc.weighted_gather(node, idx, w)


def downsample(node: dc.Node, src_positions, dst_positions) -> dc.Node:
    return dc.gather_rows(node, nearest_index(src_positions, dst_positions))


def _check_stack(student, teacher_dims, store, prefix):
    if not student:
        raise ConfigError("empty student level list")
    if len(student) != len(teacher_dims):
        raise ConfigError(
            f"{len(student)} student levels but {len(teacher_dims)} teacher dims"
        )
    for l, lf in enumerate(student):
        if f"{prefix}.proj.{l}.W" not in store:
            raise ConfigError(f"missing parameters for level {l}")
        if store[f"{prefix}.proj.{l}.W"].shape != (lf.dim, teacher_dims[l]):
            raise ConfigError(
                f"level {l}: projection is {store[f'{prefix}.proj.{l}.W'].shape}, "
                f"features need ({lf.dim}, {teacher_dims[l]})"
            )


def project(student, store, prefix="bkr"):
    """Pointwise projection of every student level into the teacher dimension."""
    return [_lin(lf.features, store, f"{prefix}.proj.{l}") for l, lf in enumerate(student)]


def tdkr(student, teacher_dims, store, prefix="bkr"):
    _check_stack(student, teacher_dims, store, prefix)
    L = len(student)
    td = [None] * L
    td[L - 1] = _lin(student[L - 1].features, store, f"{prefix}.td.top")
    for l in range(L - 2, -1, -1):
        up = upsample(td[l + 1], student[l + 1], student[l].positions)
        up = _lin(up, store, f"{prefix}.td.up.{l}")
        feat = _lin(student[l].features, store, f"{prefix}.td.feat.{l}")
        td[l] = gate_fuse(
            feat, up, store[f"{prefix}.td.gate.{l}.W"], store[f"{prefix}.td.gate.{l}.b"]
        )
    return td


def bukr(td, student, store, prefix="bkr"):
    """Bottom-up pass over ``td``; ``student`` supplies level positions."""
    if len(td) != len(student):
        raise ConfigError(f"{len(td)} td levels for {len(student)} student levels")
    L = len(td)
    bu = [None] * L
    bu[0] = _lin(td[0], store, f"{prefix}.bu.base")
    for l in range(1, L):
        down = downsample(bu[l - 1], student[l - 1].positions, student[l].positions)
        down = _lin(down, store, f"{prefix}.bu.down.{l}")
        cur = _lin(td[l], store, f"{prefix}.bu.td.{l}")
        bu[l] = gate_fuse(
            cur, down, store[f"{prefix}.bu.gate.{l}.W"], store[f"{prefix}.bu.gate.{l}.b"]
        )
    return bu


def reconfigure(student, teacher_dims, store, variant: Variant = FULL, prefix="bkr"):
    """Reconfigured student features under the given ablation switches.

    With every switch off the output is the plain projection. Disabling the
    top-down pass feeds the projected student features to the bottom-up pass.
    """
    _check_stack(student, teacher_dims, store, prefix)
    proj = None
    if variant.tdkr:
        td = tdkr(student, teacher_dims, store, prefix)
    else:
        proj = project(student, store, prefix)
        td = proj
    bu = bukr(td, student, store, prefix) if variant.bukr else []

    if variant.bukr:
        base = bu
    elif variant.tdkr:
        base = td
    else:
        base = None

    if base is None:
        out = proj
    elif variant.residual:
        proj = proj if proj is not None else project(student, store, prefix)
        out = [dc.add(b, p) for b, p in zip(base, proj)]
    else:
        out = list(base)
    return ReconfiguredStack(td=td, bu=bu, out=out)
