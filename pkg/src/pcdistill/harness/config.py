"""Run configuration and the flat ``key = value`` file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..bkr import MODES
from ..errors import ConfigError
from ..nets import EncoderConfig


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 160
    n_test: int = 400
    points: int = 128
    noise: float = 0.02
    seed: int = 0
    rotate: str = "none"  # none | z | full


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 16
    optimizer: str = "adam"


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "bkr_fmd"
    lam: float = 1.0
    k: int = 5
    tau: float | None = None  # None: mean k-NN distance per level and sample
    normalize_apc: bool = True
    apc_grad: bool = False
    epochs: int = 25
    lr: float = 0.01
    batch_size: int = 16
    optimizer: str = "adam"
    init_seed: int = 0
    student_fps_seed: int = 2
    shared_fps: bool = False


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    student_scale: float = 0.125
    teacher: TrainConfig = field(default_factory=TrainConfig)
    teacher_fps_seed: int = 1
    distill: DistillConfig = field(default_factory=DistillConfig)

    def validate(self):
        d = self.distill
        if d.lam < 0:
            raise ConfigError("distill.lambda must be >= 0")
        if d.k < 1:
            raise ConfigError("fmd.k must be >= 1")
        if d.epochs < 1 or self.teacher.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if d.batch_size < 1 or self.teacher.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if d.tau is not None and d.tau <= 0:
            raise ConfigError("fmd.tau must be positive")
        if d.mode not in MODES:
            raise ConfigError(f"unknown distill.mode {d.mode!r}; choose from {sorted(MODES)}")
        for opt in (d.optimizer, self.teacher.optimizer):
            if opt not in ("adam", "sgd"):
                raise ConfigError(f"unknown optimizer {opt!r}")
        if self.data.points < self.encoder.points_per_level[0]:
            raise ConfigError(
                f"data.points={self.data.points} below encoder level-1 size "
                f"{self.encoder.points_per_level[0]}"
            )
        if self.data.rotate not in ("none", "z", "full"):
            raise ConfigError(f"data.rotate must be none, z or full, got {self.data.rotate!r}")
        if self.data.n_train < 1 or self.data.n_test < 1:
            raise ConfigError("need at least one train and one test sample")
        if self.student_scale <= 0:
            raise ConfigError("encoder.student_scale must be positive")
        self.encoder.validate()
        return self

    @property
    def teacher_encoder(self) -> EncoderConfig:
        return replace(self.encoder, width_scale=1.0)

    @property
    def student_encoder(self) -> EncoderConfig:
        return replace(self.encoder, width_scale=self.student_scale, seed=self.distill.init_seed)

    @property
    def student_fps_seed(self) -> int:
        return self.teacher_fps_seed if self.distill.shared_fps else self.distill.student_fps_seed


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _tau(text: str):
    return None if text.lower() == "adaptive" else float(text)


# key -> (section attribute or None for top level, field name, parser)
SCHEMA = {
    "data.n_train": ("data", "n_train", int),
    "data.n_test": ("data", "n_test", int),
    "data.points": ("data", "points", int),
    "data.noise": ("data", "noise", float),
    "data.seed": ("data", "seed", int),
    "data.rotate": ("data", "rotate", str),
    "encoder.points": ("encoder", "points_per_level", _ints),
    "encoder.dims": ("encoder", "dims_per_level", _ints),
    "encoder.knn_group": ("encoder", "knn_group", int),
    "encoder.classes": ("encoder", "num_classes", int),
    "encoder.init_seed": ("encoder", "seed", int),
    "encoder.student_scale": (None, "student_scale", float),
    "teacher.epochs": ("teacher", "epochs", int),
    "teacher.lr": ("teacher", "lr", float),
    "teacher.batch_size": ("teacher", "batch_size", int),
    "teacher.optimizer": ("teacher", "optimizer", str),
    "teacher.fps_seed": (None, "teacher_fps_seed", int),
    "distill.mode": ("distill", "mode", str),
    "distill.lambda": ("distill", "lam", float),
    "distill.epochs": ("distill", "epochs", int),
    "distill.lr": ("distill", "lr", float),
    "distill.batch_size": ("distill", "batch_size", int),
    "distill.optimizer": ("distill", "optimizer", str),
    "distill.init_seed": ("distill", "init_seed", int),
    "distill.student_fps_seed": ("distill", "student_fps_seed", int),
    "distill.shared_fps": ("distill", "shared_fps", _bool),
    "fmd.k": ("distill", "k", int),
    "fmd.tau": ("distill", "tau", _tau),
    "fmd.normalize_apc": ("distill", "normalize_apc", _bool),
    "fmd.apc_grad": ("distill", "apc_grad", _bool),
}
LEVELS_KEY = "encoder.levels"


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse the flat format; errors name the offending key and line."""
    cfg = RunConfig() if base is None else base
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates: dict = {}
    levels = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == LEVELS_KEY:
            try:
                levels = (int(value), lineno)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from None
            continue
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name, conv = SCHEMA[key]
        try:
            updates.setdefault(section, {})[name] = conv(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from None

    try:
        for section, vals in updates.items():
            if section is None:
                sections.update(vals)
            else:
                sections[section] = replace(sections[section], **vals)
        cfg = RunConfig(**sections)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if levels is not None and levels[0] != cfg.encoder.levels:
        raise ConfigError(
            f"line {levels[1]}: {LEVELS_KEY} = {levels[0]} but encoder.points has "
            f"{cfg.encoder.levels} entries"
        )
    return cfg.validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "adaptive"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{LEVELS_KEY} = {cfg.encoder.levels}"]
    for key, (section, name, _) in SCHEMA.items():
        obj = cfg if section is None else getattr(cfg, section)
        lines.append(f"{key} = {_fmt(getattr(obj, name))}")
    return "\n".join(lines) + "\n"


def config_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)
