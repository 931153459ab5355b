"""Command-line entry point.

Every command writes CSV (and for training, checkpoint) artifacts into
``--out``. Exit codes: 0 ok, 1 usage, 2 config, 3 runtime.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import diffcore as dc
from . import nets, pcio
from .bkr import MODES
from .errors import ConfigError
from .harness import ablate as ablation
from .harness import train as tr
from .harness.config import RunConfig, dump_config, load_config
from .harness.data import CLASSES, dataset_from_config, gen_dataset
from .harness.reports import write_csv, write_report
from .studies import OT_BENCH_HEADER, inconsistency_hist, ot_bench

log = logging.getLogger("pcdistill")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _global_flags(parser, suppress=False):
    # Subcommand copies use SUPPRESS so flags given before the subcommand survive.
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="flat key = value config file")
    parser.add_argument("--out", default=d("out"), help="output directory (default: out)")
    parser.add_argument("--seed", type=int, default=d(None),
                        help="override the command's primary seed")
    parser.add_argument("--dry-run", action="store_true", default=d(False),
                        help="validate config and shapes only; write nothing")
    parser.add_argument("--no-timing", action="store_true", default=d(False),
                        help="write 0 in wall-time columns so artifacts are byte-stable")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pcdistill", description="Point-cloud feature distillation toolkit")
    _global_flags(p)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        _global_flags(sp, suppress=True)
        return sp

    g = add("gen", "generate the synthetic dataset (--seed: data seed)")
    g.add_argument("--format", choices=("pcld", "csv"), default="pcld")

    add("train", "pretrain the teacher (--seed: teacher init seed)")

    d = add("distill", "distill a student from a teacher checkpoint (--seed: student init seed)")
    d.add_argument("--teacher", help="teacher checkpoint (default: OUT/teacher.pdkp)")
    d.add_argument("--mode", choices=sorted(MODES), help="override distill.mode")

    a = add("ablate", "mode x seed ablation matrix")
    a.add_argument("--teacher", help="teacher checkpoint (default: OUT/teacher.pdkp)")
    a.add_argument("--modes", default=",".join(MODES), help="comma-separated modes")
    a.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    a.add_argument("--jobs", type=int, default=1)

    o = add("ot-bench", "compare OT solvers on random instances (--seed: instance seed)")
    o.add_argument("--sizes", type=_ints, default=[2, 3, 4, 5, 6, 7])
    o.add_argument("--dims", type=_ints, default=[1, 2, 8])
    o.add_argument("--repeats", type=int, default=3)

    h = add("inconsistency-hist", "teacher/student FPS position inconsistency histogram")
    h.add_argument("--source", help="directory of .pcld/.csv clouds (default: synthetic)")
    h.add_argument("--clouds", type=int, default=500, help="synthetic cloud count")
    h.add_argument("--points", type=int, default=1024, help="points per synthetic cloud")
    h.add_argument("--sample-m", type=int, default=512)
    h.add_argument("--bins", type=int, default=20)
    h.add_argument("--teacher-seed", type=int, default=1)
    h.add_argument("--student-seed", type=int, default=2)
    h.add_argument("--pairing", choices=("order", "nearest"), default="order")
    return p


def _config(args) -> RunConfig:
    if args.config is None:
        return RunConfig().validate()
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return load_config(path)


def _teacher_path(args) -> Path:
    path = Path(args.teacher) if args.teacher else Path(args.out) / "teacher.pdkp"
    if not path.is_file():
        raise FileNotFoundError(f"teacher checkpoint not found: {path}")
    return path


def _failed(report) -> int:
    if report.status != "ok":
        log.error("run failed: %s", report.error)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gen(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        cfg = replace(cfg, data=replace(cfg.data, seed=args.seed))
    if args.dry_run:
        return EXIT_OK
    out = Path(args.out)
    data = dataset_from_config(cfg.data, cfg.encoder.num_classes)
    cloud_dir = out / "clouds"
    cloud_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for split, samples in (("train", data.train), ("test", data.test)):
        for i, s in enumerate(samples):
            name = f"{split}_{i:05d}.{args.format}"
            if args.format == "pcld":
                pcio.write_pcld(s.cloud, cloud_dir / name)
            else:
                pcio.write_csv(s.cloud, cloud_dir / name)
            rows.append([split, i, s.label, CLASSES[s.label], f"clouds/{name}"])
    write_csv(out / "labels.csv", ["split", "index", "label", "class", "file"], rows)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    log.info("wrote %d clouds to %s", len(rows), cloud_dir)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        cfg = replace(cfg, encoder=replace(cfg.encoder, seed=args.seed))
    if args.dry_run:
        t_cfg = cfg.teacher_encoder
        data = gen_dataset(1, 1, cfg.data.points, cfg.data.noise, cfg.data.seed,
                           cfg.data.rotate, cfg.encoder.num_classes)
        nets.forward(data.train[0].cloud, t_cfg, nets.init_encoder(t_cfg))
        return EXIT_OK
    store, report = tr.pretrain_teacher(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out, "teacher", timing=not args.no_timing)
    if report.status == "ok":
        dc.save_params(store, out / "teacher.pdkp")
        log.info("teacher OA %.2f mAcc %.2f", report.oa, report.macc)
    return _failed(report)


def cmd_distill(args, cfg: RunConfig) -> int:
    dcfg = cfg.distill
    if args.seed is not None:
        dcfg = replace(dcfg, init_seed=args.seed)
    if args.mode:
        dcfg = replace(dcfg, mode=args.mode)
    cfg = replace(cfg, distill=dcfg).validate()
    if args.dry_run:
        teacher = dc.load_params(_teacher_path(args)) if args.teacher else None
        losses = tr.dry_run(cfg, teacher)
        log.info("dry run ok; level losses %s", losses)
        return EXIT_OK
    teacher = dc.load_params(_teacher_path(args))
    student, bkr_store, report = tr.distill(cfg, teacher)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"distill_{dcfg.mode}"
    write_report(report, out, stem, timing=not args.no_timing)
    if report.status == "ok":
        dc.save_params(student, out / f"{stem}_student.pdkp")
        dc.save_params(bkr_store, out / f"{stem}_bkr.pdkp")
        log.info("student OA %.2f mAcc %.2f", report.oa, report.macc)
    return _failed(report)


def cmd_ablate(args, cfg: RunConfig) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    unknown = [m for m in modes if m not in MODES]
    if unknown:
        raise ConfigError(f"unknown modes {unknown}; choose from {sorted(MODES)}")
    seeds = [args.seed] if args.seed is not None else args.seeds
    if args.dry_run:
        for m in modes:
            tr.dry_run(replace(cfg, distill=replace(cfg.distill, mode=m)))
        return EXIT_OK
    teacher = dc.load_params(_teacher_path(args))
    rows = ablation.ablate(cfg, teacher, modes, seeds, timing=not args.no_timing,
                           jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", ablation.HEADER, rows)
    for mode, oa in ablation.mode_means(rows).items():
        log.info("%-14s mean OA %.2f", mode, oa)
    return EXIT_OK


def cmd_ot_bench(args, cfg: RunConfig) -> int:
    if min(args.sizes, default=1) < 1 or min(args.dims, default=1) < 1 or args.repeats < 1:
        raise ConfigError("sizes, dims and repeats must be positive")
    if args.dry_run:
        return EXIT_OK
    seed = 0 if args.seed is None else args.seed
    rows = ot_bench(args.sizes, args.dims, args.repeats, seed, timing=not args.no_timing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ot_bench.csv", OT_BENCH_HEADER, rows)
    return EXIT_OK


def _source_clouds(args, cfg):
    if args.source:
        src = Path(args.source)
        if not src.is_dir():
            raise FileNotFoundError(f"cloud directory not found: {src}")
        files = sorted(p for p in src.iterdir() if p.suffix in (".pcld", ".csv"))
        return [pcio.read_cloud(p) for p in files]
    seed = cfg.data.seed if args.seed is None else args.seed
    data = gen_dataset(args.clouds, 0, args.points, cfg.data.noise, seed, cfg.data.rotate)
    return [s.cloud for s in data.train]


def cmd_inconsistency_hist(args, cfg: RunConfig) -> int:
    if args.sample_m < 1 or args.bins < 1:
        raise ConfigError("--sample-m and --bins must be positive")
    if args.dry_run:
        return EXIT_OK
    clouds = _source_clouds(args, cfg)
    res = inconsistency_hist(clouds, args.sample_m, args.bins, args.teacher_seed,
                             args.student_seed, args.pairing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[float(lo), float(hi), float(f)]
            for lo, hi, f in zip(res.edges[:-1], res.edges[1:], res.freq)]
    write_csv(out / "inconsistency_hist.csv", ["bin_lo", "bin_hi", "freq"], rows)
    write_csv(out / "inconsistency_summary.csv", ["key", "value"], [
        ("clouds", len(clouds)),
        ("skipped", res.skipped),
        ("pairs", res.n_pairs),
        ("frac_above_1", float(res.frac_above_1)),
        ("max_distance", float(res.max_distance)),
        ("pairing", args.pairing),
    ])
    if res.skipped:
        log.warning("skipped %d clouds with fewer than %d points", res.skipped, args.sample_m)
    log.info("fraction of pairs farther than 1.0: %.4f", res.frac_above_1)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "distill": cmd_distill,
    "ablate": cmd_ablate,
    "ot-bench": cmd_ot_bench,
    "inconsistency-hist": cmd_inconsistency_hist,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
