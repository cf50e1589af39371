"""Held-out metrics, naive baselines, experiment preparation and sweeps."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .data import (
    HeldOut,
    SeriesSet,
    SynthConfig,
    feature_stats,
    holdout_mask,
    normalize,
    split_indices,
    synth_generate,
    thin_observations,
)
from .training import FitResult, fit, predict

logger = logging.getLogger(__name__)

SWEEP_AXES = ("observation_rate", "prototype_count", "prototype_start_epoch", "loss_ablation")
SWEEP_HEADER = ("axis", "value", "seed", "mse", "mae", "n_points")
BASELINES = ("mean", "locf")
# loss_ablation values name the prototype losses kept on
LOSS_TERMS = {"s2p": "lambda_s2p", "p2s": "lambda_p2s", "sep": "lambda_sep"}


@dataclass
class MetricReport:
    mse: float
    mae: float
    n_eval_points: int
    per_seed: list[tuple[int, float, float]] = field(default_factory=list)

    @classmethod
    def aggregate(cls, reports: Sequence[tuple[int, "MetricReport"]]) -> "MetricReport":
        """Mean over seeds; ``mse_std``/``mae_std`` are population std (0 for one seed)."""
        mses = np.array([r.mse for _, r in reports])
        maes = np.array([r.mae for _, r in reports])
        return cls(float(mses.mean()), float(maes.mean()), int(sum(r.n_eval_points for _, r in reports)),
                   [(seed, r.mse, r.mae) for seed, r in reports])

    @property
    def mse_std(self) -> float:
        return float(np.std([m for _, m, _ in self.per_seed])) if self.per_seed else 0.0

    @property
    def mae_std(self) -> float:
        return float(np.std([a for _, _, a in self.per_seed])) if self.per_seed else 0.0


def evaluate(predictions, truth, eval_masks) -> MetricReport:
    """MSE and MAE over entries flagged in ``eval_masks`` only.

    Each argument is a sequence of ``[T, N]`` arrays (one per series) or a
    single array.
    """
    if isinstance(predictions, np.ndarray):
        predictions, truth, eval_masks = [predictions], [truth], [eval_masks]
    errs = []
    for p, t, em in zip(predictions, truth, eval_masks, strict=True):
        p, t, em = np.asarray(p), np.asarray(t), np.asarray(em)
        if p.shape != t.shape or p.shape != em.shape:
            raise ValueError(f"shape mismatch: predictions {p.shape}, truth {t.shape}, mask {em.shape}")
        errs.append((p - t)[em > 0])
    err = np.concatenate(errs) if errs else np.zeros(0)
    if err.size == 0:
        raise ValueError("evaluation mask selects no entries")
    return MetricReport(float(np.mean(err**2)), float(np.mean(np.abs(err))), int(err.size))


def baseline_impute(kind: str, series_set: SeriesSet) -> list[np.ndarray]:
    """Naive imputations in normalised space.

    ``mean`` predicts 0 (the feature mean) at every missing entry; ``locf``
    carries the last observed value forward and predicts 0 before the first
    observation. Observed entries are returned unchanged.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")
    out = []
    for s in series_set:
        obs = s.mask > 0
        if kind == "mean":
            out.append(np.where(obs, s.values, 0.0))
            continue
        filled = np.zeros_like(s.values)
        last = np.zeros(s.values.shape[1])
        for t in range(s.length):
            last = np.where(obs[t], s.values[t], last)
            filled[t] = last
        out.append(filled)
    return out


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class Experiment:
    """Normalised train input plus validation and test hold-outs for one seed."""

    train: SeriesSet
    val: HeldOut
    test: HeldOut
    stats: dict
    seed: int


def prepare(series_set: SeriesSet, seed: int, holdout_rate: float = 0.1, stats=None) -> Experiment:
    """Hold out entries, split 8:1:1 by series, normalise with training-split stats."""
    split = holdout_mask(series_set, holdout_rate, seed)
    tr, va, te = split_indices(len(series_set), seed)
    blinded = split.blind(series_set)
    if stats is None:
        stats = feature_stats(blinded.subset(tr))
    truth, _ = normalize(series_set, stats)
    model_input, _ = normalize(blinded, stats)
    return Experiment(
        train=model_input.subset(tr),
        val=HeldOut(model_input.subset(va), truth.subset(va), split.subset(va)),
        test=HeldOut(model_input.subset(te), truth.subset(te), split.subset(te)),
        stats=stats,
        seed=seed,
    )


def evaluate_model(model, held: HeldOut, prototypes_active: bool, batch_size: int = 64) -> MetricReport:
    preds = predict(model, held.input, prototypes_active, batch_size)
    return evaluate(preds, [s.values for s in held.truth], held.split.eval_masks)


def evaluate_baseline(kind: str, held: HeldOut) -> MetricReport:
    preds = baseline_impute(kind, held.input)
    return evaluate(preds, [s.values for s in held.truth], held.split.eval_masks)


@dataclass
class RunResult:
    fit: FitResult
    test: MetricReport
    experiment: Experiment


def run_experiment(series_set: SeriesSet, config: TrainConfig, seed: int | None = None) -> RunResult:
    """Prepare, train and score on the test hold-out; ``seed`` defaults to the config's."""
    seed = config.seed if seed is None else seed
    config = config.replace(seed=seed)
    exp = prepare(series_set, seed, config.holdout_rate)
    result = fit(exp.train, config, exp.val)
    report = evaluate_model(result.model, exp.test, result.prototypes_active, config.batch_size)
    return RunResult(result, report, exp)


def config_for(axis: str, value, base: TrainConfig) -> TrainConfig:
    if axis == "prototype_count":
        return base.replace(n_prototypes=int(value))
    if axis == "prototype_start_epoch":
        return base.replace(prototype_start_epoch=int(value))
    if axis == "loss_ablation":
        kept = parse_loss_terms(value)
        zeroed = {attr: 0.0 for term, attr in LOSS_TERMS.items() if term not in kept}
        return base.replace(**zeroed)
    if axis == "observation_rate":
        return base
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def parse_loss_terms(value: str) -> set[str]:
    """``"s2p+p2s+sep"`` style; ``"none"`` keeps no prototype loss."""
    value = str(value).strip().lower()
    if value in ("none", ""):
        return set()
    terms = {t.strip() for t in value.split("+")}
    unknown = terms - set(LOSS_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}; use {'+'.join(LOSS_TERMS)} or 'none'")
    return terms


def sweep(
    axis: str,
    values: Sequence,
    base: TrainConfig,
    seeds: Sequence[int],
    data: SeriesSet | None = None,
    synth: SynthConfig | None = None,
    progress: Callable[[str], None] | None = None,
) -> list[dict]:
    """Fit and score every ``(value, seed)`` cell; returns CSV-ready rows.

    Per-seed rows are followed by ``seed="mean"`` and ``seed="std"`` rows for
    each value. ``observation_rate`` regenerates synthetic data at that rate
    when ``synth`` is given, otherwise it thins the observations of ``data``.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    if (data is None) == (synth is None):
        raise ValueError("give exactly one of data or synth")
    rows = []
    for value in values:
        cell = []
        for seed in seeds:
            if synth is not None:
                rate = float(value) if axis == "observation_rate" else synth.obs_rate
                ds = synth_generate(SynthConfig(**{**synth.__dict__, "obs_rate": rate}))
            elif axis == "observation_rate":
                ds = thin_observations(data, float(value), seed)
            else:
                ds = data
            run = run_experiment(ds, config_for(axis, value, base), seed)
            cell.append((seed, run.test))
            rows.append(_row(axis, value, seed, run.test.mse, run.test.mae, run.test.n_eval_points))
            if progress:
                progress(f"{axis}={value} seed={seed} mse={run.test.mse:.4f} mae={run.test.mae:.4f}")
        agg = MetricReport.aggregate(cell)
        rows.append(_row(axis, value, "mean", agg.mse, agg.mae, agg.n_eval_points))
        rows.append(_row(axis, value, "std", agg.mse_std, agg.mae_std, agg.n_eval_points))
    return rows


def _row(axis, value, seed, mse, mae, n):
    return {"axis": axis, "value": value, "seed": seed, "mse": mse, "mae": mae, "n_points": n}


def write_rows(rows: Sequence[dict], path, header: Sequence[str] = SWEEP_HEADER) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in header})


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    if v is None:
        return ""
    return v
