"""Command-line entry point: ``difflosslab <command> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error,
5 I/O error (checkpoints, locks, files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config, override, preset, schema_text, write_config
from .exceptions import DiffLossLabError

EXIT_CODES = {"config": 2, "data": 3, "numeric": 4, "io": 5}


def _gamma_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--gammas expects comma-separated numbers, got {text!r}") from None


def _load(args, **changes):
    cfg = load_config(args.config)
    if getattr(args, "run_id", None):
        changes["run_id"] = args.run_id
    if getattr(args, "out_dir", None):
        changes["out_dir"] = args.out_dir
    return override(cfg, **changes) if changes else cfg


def _report_dir(args) -> Path:
    from .runs import output_root

    return Path(args.out) if args.out else output_root() / "reports"


def _print_rows(rows):
    for r in rows:
        print(json.dumps(r, sort_keys=True, default=str))


def cmd_ddpm_train(args):
    from .pipelines import pretrain_ddpm

    cfg = _load(args)
    print(json.dumps(pretrain_ddpm(cfg, resume=args.resume), indent=2, sort_keys=True))


def cmd_restore_train(args):
    from .pipelines import train_restoration

    changes = {}
    if args.diffloss is not None:
        changes["diffloss.enabled"] = args.diffloss == "on"
    if args.gamma is not None:
        changes["diffloss.gamma"] = args.gamma
    if args.variant is not None:
        changes["diffloss.variant"] = args.variant
    cfg = _load(args, **changes)
    result = train_restoration(cfg, resume=args.resume)
    _print_rows(result.pop("metrics", []))
    print(json.dumps(result, indent=2, sort_keys=True))


def cmd_evaluate(args):
    from .pipelines import evaluate_run

    for run in args.run_dirs:
        _print_rows(evaluate_run(run))


def cmd_hspace_probe(args):
    from .pipelines import hspace_probe

    _print_rows(hspace_probe(_load(args)))


def cmd_classify_eval(args):
    from .pipelines import classify_eval

    _print_rows(classify_eval(args.run_dirs, _report_dir(args)))


def cmd_report(args):
    from .pipelines import report

    rows, deltas = report(args.run_dirs, _report_dir(args))
    cols = ("run_id", "psnr_db", "ssim", "desk_fid", "top1")
    print(" | ".join(cols))
    for r in rows:
        print(" | ".join(str(r[c]) for c in cols))
    print()
    print("run_id | d_psnr_db | d_ssim | d_desk_fid | d_top1")
    for d in deltas:
        print(f"{d['run_id']} | {d['d_psnr_db']:+.4f} | {d['d_ssim']:+.4f} | {d['d_desk_fid']:+.4f} | {d['d_top1']:+.4f}")


def cmd_sweep_gamma(args):
    from .pipelines import weight_sweep

    _print_rows(weight_sweep(_load(args), args.gammas))


def cmd_ablate(args):
    from .pipelines import ablation

    _print_rows(ablation(_load(args), args.variants.split(",")))


def cmd_probe_train(args):
    from .pipelines import get_probe

    cfg = _load(args)
    probe = get_probe(cfg)
    print(json.dumps({"clean_accuracy": probe.clean_accuracy_, "gate": probe.gate,
                      "gate_passed": probe.gate_passed_}))


def cmd_schema(args):
    sys.stdout.write(schema_text())


def cmd_init_config(args):
    cfg = preset(args.preset, args.run_id)
    write_config(cfg, args.path)
    print(args.path)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="difflosslab", description="DiffLoss desk-scale experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--run-id", help="override run_id")
        sp.add_argument("--out-dir", help="override out_dir")
        sp.set_defaults(func=fn)
        return sp

    sp = with_config("ddpm-train", cmd_ddpm_train, "pretrain the toy DDPM on clean shapes")
    sp.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")

    sp = with_config("restore-train", cmd_restore_train, "train a restorer with or without DiffLoss")
    sp.add_argument("--diffloss", choices=("on", "off"), help="override diffloss.enabled")
    sp.add_argument("--gamma", type=float, help="override diffloss.gamma")
    sp.add_argument("--variant", choices=("epsilon", "x0", "x_prev"), help="override diffloss.variant")
    sp.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")

    sp = sub.add_parser("evaluate", help="score trained runs; writes metrics.csv and grid.png")
    sp.add_argument("run_dirs", nargs="+")
    sp.set_defaults(func=cmd_evaluate)

    with_config("hspace-probe", cmd_hspace_probe, "bottleneck perturbation feature-distance sweep")

    for name, fn, help_ in (("classify-eval", cmd_classify_eval, "probe top-1 on clean/degraded/restored"),
                            ("report", cmd_report, "side-by-side metrics and deltas vs the first run")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("run_dirs", nargs="+")
        sp.add_argument("--out", help="output directory (default <output root>/reports)")
        sp.set_defaults(func=fn)

    sp = with_config("sweep-gamma", cmd_sweep_gamma, "one restoration run per DiffLoss weight")
    sp.add_argument("--gammas", type=_gamma_list, help="comma-separated gammas (default: config sweep_gammas)")

    sp = with_config("ablate", cmd_ablate, "one restoration run per DiffLoss variant")
    sp.add_argument("--variants", default="epsilon,x0,x_prev")

    with_config("probe-train", cmd_probe_train, "train (or fetch the cached) evaluation probe")

    sp = sub.add_parser("schema", help="print the config JSON schema")
    sp.set_defaults(func=cmd_schema)

    sp = sub.add_parser("init-config", help="write a preset config file")
    sp.add_argument("path")
    sp.add_argument("--preset", default="desk", choices=("desk", "ci"))
    sp.add_argument("--run-id", default="run")
    sp.set_defaults(func=cmd_init_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except DiffLossLabError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
