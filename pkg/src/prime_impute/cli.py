"""Command-line entry point: synth, train, impute, evaluate and sweep.

Training flags mirror the ``TrainConfig`` field names. Values are resolved as
defaults, then ``--config`` JSON, then explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import TrainConfig
from .data import (
    EventFileError,
    SynthConfig,
    denormalize,
    normalize,
    parse_events,
    read_variables,
    synth_generate,
    write_events,
)
from .evaluation import (
    BASELINES,
    SWEEP_AXES,
    evaluate_baseline,
    evaluate_model,
    prepare,
    sweep,
    write_rows,
)
from .model import make_batch
from .training import Checkpoint, CheckpointError, TrainingDiverged, fit, load_checkpoint, save_checkpoint

PROG = "prime-impute"
REPORT_HEADER = ("method", "seed", "mse", "mae", "n_points")
HISTORY_HEADER = ("epoch", "train_loss", "val_mse", "val_mae", "prototypes_active")

logger = logging.getLogger(__name__)


class CommandError(Exception):
    """A user-facing failure reported as one line on standard error."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training (TrainConfig fields)")
    g.add_argument("--config", type=Path, help="JSON file of TrainConfig fields; flags override it")
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        if isinstance(default, bool):
            g.add_argument(_flag(f.name), action="store_true", default=argparse.SUPPRESS)
        elif f.name in ("margin",):
            g.add_argument(_flag(f.name), type=float, default=argparse.SUPPRESS, metavar="X")
        elif f.name in ("d_mlp",):
            g.add_argument(_flag(f.name), type=int, default=argparse.SUPPRESS, metavar="N")
        elif f.name == "gelu":
            g.add_argument(_flag(f.name), choices=("exact", "tanh"), default=argparse.SUPPRESS)
        else:
            g.add_argument(_flag(f.name), type=type(default), default=argparse.SUPPRESS,
                           metavar=type(default).__name__.upper())


def _config(args) -> TrainConfig:
    values = TrainConfig.from_file(args.config).to_dict() if args.config else {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in vars(args):
            values[f.name] = getattr(args, f.name)
    return TrainConfig.from_dict(values)


def _add_synth_flags(p: argparse.ArgumentParser, with_seed: bool = True) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--n-series", type=int, default=SynthConfig.n_series)
    g.add_argument("--n-features", type=int, default=SynthConfig.n_features)
    g.add_argument("--t-min", type=int, default=SynthConfig.t_range[0], help="shortest series length")
    g.add_argument("--t-max", type=int, default=SynthConfig.t_range[1], help="longest series length")
    g.add_argument("--obs-rate", type=float, default=SynthConfig.obs_rate)
    g.add_argument("--n-regimes", type=int, default=SynthConfig.n_regimes)
    g.add_argument("--noise", type=float, default=SynthConfig.noise)
    if with_seed:
        g.add_argument("--seed", type=int, default=0)


def _synth_config(args, seed: int) -> SynthConfig:
    if args.t_min < 1 or args.t_max < args.t_min:
        raise CommandError("need 1 <= --t-min <= --t-max")
    return SynthConfig(n_series=args.n_series, n_features=args.n_features, t_range=(args.t_min, args.t_max),
                       obs_rate=args.obs_rate, seed=seed, n_regimes=args.n_regimes, noise=args.noise)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Prototype recurrent imputation for irregular time series.")
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic event CSV")
    _add_synth_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="fit a model on an event CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--variables", type=Path, help="variable order, one name per line")
    p.add_argument("--out", type=Path, default=Path("prime-checkpoint"), help="checkpoint directory")
    p.add_argument("--history", type=Path, help="history CSV (default: <out>/history.csv)")
    p.add_argument("--plot", type=Path, help="also render the history to this image file")
    _add_config_flags(p)

    p = sub.add_parser("impute", help="fill every missing entry of an event CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("evaluate", help="score a checkpoint and the baselines on the test hold-out")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seed", type=int, help="hold-out and split seed (default: the training seed)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sweep", help="fit and score over one configuration axis")
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated values; loss terms joined by '+'")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--data", type=Path, help="event CSV (default: synthetic data from the flags below)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--plot", type=Path, help="also render the table to this image file")
    _add_synth_flags(p, with_seed=False)
    _add_config_flags(p)
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _read_data(path: Path, variables=None):
    if not path.is_file():
        raise CommandError(f"{path}: no such file")
    data = parse_events(path, variables)
    if len(data) == 0:
        raise CommandError(f"{path}: no events")
    return data


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else v


def cmd_synth(args) -> None:
    data = synth_generate(_synth_config(args, args.seed))
    write_events(data, args.out)
    logger.info("wrote %d series to %s", len(data), args.out)


def cmd_train(args) -> None:
    config = _config(args)
    variables = read_variables(args.variables) if args.variables else None
    data = _read_data(args.data, variables)
    exp = prepare(data, config.seed, config.holdout_rate)
    result = fit(exp.train, config, exp.val, log_every=10 if args.verbose else 0)
    metrics = {"best_val_mse": None if np.isnan(result.best_val_mse) else result.best_val_mse}
    save_checkpoint(Checkpoint(result.model, data.features, exp.stats, result.prototypes_active,
                               result.best_epoch, metrics), args.out)
    history = args.history or args.out / "history.csv"
    _write_csv(history, HISTORY_HEADER, [[_fmt(h[k]) for k in HISTORY_HEADER] for h in result.history])
    if args.plot:
        from .plotting import plot_history

        plot_history(result.history, args.plot)
    logger.info("checkpoint %s (best epoch %d)", args.out, result.best_epoch)


def _load(path: Path) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ckpt.norm_stats is None:
        raise CommandError(f"{path}: checkpoint carries no normalisation statistics")
    return ckpt


@torch.no_grad()
def cmd_impute(args) -> None:
    ckpt = _load(args.checkpoint)
    data = _read_data(args.data, ckpt.features)
    normed, _ = normalize(data, ckpt.norm_stats)
    filled = []
    series = list(normed)
    for i in range(0, len(series), args.batch_size):
        chunk = series[i : i + args.batch_size]
        x = ckpt.model.impute(make_batch(chunk), ckpt.prototypes_active).double().numpy()
        for b, s in enumerate(chunk):
            # observed entries pass through untouched; ones everywhere marks every entry as written
            vals = np.where(s.mask > 0, s.values, x[b, : s.length])
            filled.append(s.with_arrays(values=vals, mask=np.ones_like(s.mask)))
    out = denormalize(normed.replace_series(filled), ckpt.norm_stats, all_entries=True)
    # exact raw values where observed, rather than a normalise/denormalise round trip
    exact = [o.with_arrays(values=np.where(s.mask > 0, s.values, o.values)) for o, s in zip(out, data)]
    write_events(out.replace_series(exact), args.out)
    logger.info("imputed %d series into %s", len(exact), args.out)


def cmd_evaluate(args) -> None:
    ckpt = _load(args.checkpoint)
    data = _read_data(args.data, ckpt.features)
    seed = ckpt.config.seed if args.seed is None else args.seed
    exp = prepare(data, seed, ckpt.config.holdout_rate, stats=ckpt.norm_stats)
    if exp.test.split.n_points == 0:
        raise CommandError("the test split holds no evaluation points; use more data")
    reports = [("prime", evaluate_model(ckpt.model, exp.test, ckpt.prototypes_active, ckpt.config.batch_size))]
    reports += [(kind, evaluate_baseline(kind, exp.test)) for kind in BASELINES]
    _write_csv(args.out, REPORT_HEADER, [[m, seed, _fmt(r.mse), _fmt(r.mae), r.n_eval_points] for m, r in reports])
    for m, r in reports:
        logger.info("%s mse %.4f mae %.4f", m, r.mse, r.mae)


def _split_list(text: str, kind=str) -> list:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise CommandError("empty value list")
    try:
        return [kind(v) for v in items]
    except ValueError:
        raise CommandError(f"cannot parse {text!r} as {kind.__name__} values") from None


def cmd_sweep(args) -> None:
    base = _config(args)
    kind = {"observation_rate": float, "prototype_count": int, "prototype_start_epoch": int}.get(args.axis, str)
    values = _split_list(args.values, kind)
    seeds = _split_list(args.seeds, int)
    if args.data:
        rows = sweep(args.axis, values, base, seeds, data=_read_data(args.data), progress=logger.info)
    else:
        rows = sweep(args.axis, values, base, seeds, synth=_synth_config(args, base.seed), progress=logger.info)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_rows(rows, args.out)
    if args.plot:
        from .plotting import plot_sweep

        plot_sweep(rows, args.plot)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "impute": cmd_impute, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep}


def _set_threads() -> None:
    raw = os.environ.get("PRIME_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CommandError(f"PRIME_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CommandError(f"PRIME_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        _set_threads()
        COMMANDS[args.command](args)
    except (CommandError, CheckpointError, EventFileError, TrainingDiverged, ValueError, OSError) as e:
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"{PROG} {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
