"""Command-line front door: generate, train, eval, gradcheck, sweep.

Every command reads the same flat key=value config (flags override file
values), writes a resolved snapshot next to its outputs, and reports through
exit codes: 0 success, 1 usage or config error, 2 numeric failure, 3 I/O
error.
"""

from __future__ import annotations

import argparse
import statistics
import sys
from pathlib import Path

from . import config as cfg
from . import data, gradcheck, metrics, trainer
from .checkpoint import load_tensors
from .errors import ConfigError, CorruptFileError, NumericError, ShapeError

EVAL_HEADER = "id,ja,di,ac,se,sp,dice"
SWEEP_HEADER = "mode,labeled_fraction,seed,ja,di,ac,se,sp"


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting so main() owns the exit code."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tcsm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, summary in (
        ("generate", "write a synthetic dataset directory"),
        ("train", "train one model and write metrics + checkpoints"),
        ("eval", "score a checkpoint on the validation pool"),
        ("gradcheck", "finite-difference check of every backward rule"),
        ("sweep", "train/eval a (mode, labeled fraction, seed) grid"),
    ):
        command = sub.add_parser(name, help=summary)
        command.add_argument("--config", metavar="PATH", default=None,
                             help="key=value config file")
        command.add_argument("--seed", type=int, default=None, metavar="U64")
        command.add_argument("--out", default=None, metavar="DIR",
                             help="output directory (out_dir)")
        command.add_argument("--mode", default=None,
                             choices=list(trainer.MODES))
        command.add_argument("--labeled-fraction", type=float, default=None,
                             metavar="F", dest="labeled_fraction")
        command.add_argument("--epochs", type=int, default=None, metavar="N")
        if name == "eval":
            command.add_argument("--checkpoint", default=None, metavar="PATH")
        if name == "generate":
            command.add_argument("--num-images", type=int, default=None,
                                 metavar="N", dest="num_images")
    return parser


def _flag_overrides(args) -> dict:
    pairs = {
        "seed": args.seed,
        "out_dir": args.out,
        "mode": args.mode,
        "labeled_fraction": args.labeled_fraction,
        "epochs": args.epochs,
        "checkpoint": getattr(args, "checkpoint", None),
        "num_images": getattr(args, "num_images", None),
    }
    return {key: str(value) for key, value in pairs.items() if value is not None}


def _load_run_config(args) -> cfg.RunConfig:
    return cfg.load_config(args.config, _flag_overrides(args))


def cmd_generate(run: cfg.RunConfig) -> int:
    dataset = data.build_dataset(cfg.genspec(run), run.labeled_fraction,
                                 run.val_fraction, split_seed=run.seed)
    data.save_dataset(dataset, run.data_dir)
    cfg.write_resolved(run, run.data_dir)
    print(f"wrote {run.data_dir}: {len(dataset.labeled)} labeled, "
          f"{len(dataset.unlabeled)} unlabeled, "
          f"{len(dataset.validation)} validation "
          f"({dataset.image_size}x{dataset.image_size})")
    return 0


def cmd_train(run: cfg.RunConfig) -> int:
    dataset = data.load_dataset(run.data_dir)
    train_config = cfg.train_config(run)
    cfg.write_resolved(run, run.out_dir)
    params, records = trainer.train(dataset, train_config, out_dir=run.out_dir)
    last = records[-1]
    print(f"{train_config.mode}: {len(records)} epochs, final "
          f"val_ja={trainer.fmt_float(last.val.ja)} "
          f"val_di={trainer.fmt_float(last.val.di)}")
    return 0


def _eval_report_lines(report) -> list:
    lines = [EVAL_HEADER]
    for case in report.cases:
        cells = [case.id] + [trainer.fmt_float(v) for v in case.scores]
        cells.append(trainer.fmt_float(case.scores.di))
        lines.append(",".join(cells))
    summary = ["mean"] + [trainer.fmt_float(v) for v in
                          (report.ja, report.di, report.ac, report.se, report.sp)]
    summary.append(trainer.fmt_float(report.per_case_dice_mean))
    lines.append(",".join(summary))
    return lines


def cmd_eval(run: cfg.RunConfig) -> int:
    checkpoint = run.checkpoint or str(Path(run.out_dir) / "ckpt_final.tcsm")
    params = load_tensors(checkpoint)
    dataset = data.load_dataset(run.data_dir)
    report = metrics.evaluate(params, dataset.validation, cfg.net_config(run))
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_report.csv").write_text(
        "\n".join(_eval_report_lines(report)) + "\n")
    cfg.write_resolved(run, out_dir)
    print(f"evaluated {checkpoint} on {len(report.cases)} images: "
          f"ja={trainer.fmt_float(report.ja)} di={trainer.fmt_float(report.di)}")
    return 0


def cmd_gradcheck(run: cfg.RunConfig) -> int:
    results = gradcheck.run_all(seed=run.seed)
    for line in gradcheck.report_lines(results):
        print(line)
    failed = [r for r in results if not r.ok]
    if failed:
        raise NumericError(f"{len(failed)} gradient check(s) failed: "
                           + ", ".join(r.name for r in failed))
    print(f"all {len(results)} checks passed")
    return 0


def _sweep_cells(run: cfg.RunConfig) -> list:
    return [(mode, fraction, seed)
            for mode in run.sweep_modes
            for fraction in run.sweep_fractions
            for seed in run.sweep_seeds]


def _read_done_cells(path: Path) -> dict:
    done = {}
    if not path.is_file():
        return done
    lines = path.read_text().splitlines()
    if not lines or lines[0] != SWEEP_HEADER:
        raise CorruptFileError(f"{path}: unexpected sweep header")
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != 8:
            raise CorruptFileError(f"{path}: malformed row {line!r}")
        try:
            seed = int(cells[2])
        except ValueError:
            continue  # mean/stdev summary rows are not cells
        done[(cells[0], float(cells[1]), seed)] = line
    return done


def _sweep_summary_rows(rows: dict) -> list:
    by_group = {}
    for (mode, fraction, _), line in rows.items():
        by_group.setdefault((mode, fraction), []).append(
            [float(v) for v in line.split(",")[3:]])
    out = []
    for (mode, fraction) in sorted(by_group):
        scores = by_group[(mode, fraction)]
        columns = list(zip(*scores))
        means = [statistics.mean(col) for col in columns]
        stdevs = [statistics.stdev(col) if len(col) > 1 else 0.0 for col in columns]
        prefix = f"{mode},{trainer.fmt_float(fraction)}"
        out.append(prefix + ",mean," + ",".join(trainer.fmt_float(v) for v in means))
        out.append(prefix + ",stdev," + ",".join(trainer.fmt_float(v) for v in stdevs))
    return out


def _write_sweep_csv(path: Path, rows: dict, include_summary: bool) -> None:
    ordered = [rows[key] for key in sorted(rows)]
    lines = [SWEEP_HEADER] + ordered
    if include_summary:
        lines += _sweep_summary_rows(rows)
    path.write_text("\n".join(lines) + "\n")


def run_sweep_cell(dataset_pairs, provenance, run: cfg.RunConfig,
                   mode: str, fraction: float, seed: int):
    """Train and score one grid cell; returns the per-image mean scores."""
    split_seed = int(provenance["split_seed"])
    val_fraction = float(provenance["val_fraction"])
    cell_ds = data.split(dataset_pairs, fraction, val_fraction, split_seed)
    overrides = {"mode": mode, "labeled_fraction": str(fraction), "seed": str(seed)}
    cell_cfg = cfg.train_config(cfg.apply_settings(run, overrides, "sweep"))
    params, _ = trainer.train(cell_ds, cell_cfg)
    return metrics.evaluate(params, cell_ds.validation, cell_cfg.net)


def cmd_sweep(run: cfg.RunConfig) -> int:
    dataset = data.load_dataset(run.data_dir)
    spec = data.genspec_from_provenance(dataset.provenance)
    pairs = data.generate(spec)
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(run, out_dir)
    sweep_path = out_dir / "sweep.csv"
    rows = _read_done_cells(sweep_path)

    cells = _sweep_cells(run)
    for mode, fraction, seed in cells:
        key = (mode, fraction, seed)
        if key in rows:
            print(f"skip {mode} fraction={trainer.fmt_float(fraction)} seed={seed} "
                  f"(already in {sweep_path.name})")
            continue
        report = run_sweep_cell(pairs, dataset.provenance, run, mode, fraction, seed)
        cells_txt = [mode, trainer.fmt_float(fraction), str(seed)]
        cells_txt += [trainer.fmt_float(v) for v in
                      (report.ja, report.di, report.ac, report.se, report.sp)]
        rows[key] = ",".join(cells_txt)
        _write_sweep_csv(sweep_path, rows, include_summary=False)
        print(f"{mode} fraction={trainer.fmt_float(fraction)} seed={seed}: "
              f"ja={trainer.fmt_float(report.ja)}")
    _write_sweep_csv(sweep_path, rows, include_summary=True)
    print(f"sweep complete: {len(rows)} cells in {sweep_path}")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        run = _load_run_config(args)
        return _COMMANDS[args.command](run)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (NumericError, ShapeError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 2
    except (CorruptFileError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 3


def run() -> None:
    sys.exit(main())
