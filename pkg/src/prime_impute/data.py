"""Irregular multivariate series: containers, event-file IO, time gaps,
normalisation, hold-out masking and a synthetic generator."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EVENT_HEADER = ("series_id", "timestamp", "variable", "value")
STD_FLOOR = 1e-8


class EventFileError(ValueError):
    """Event CSV does not follow the schema."""


@dataclass(frozen=True)
class Series:
    """One irregularly sampled series.

    ``timestamps`` holds a time per (step, feature); when the source only
    records one time per step, every feature column carries that time.
    Missing entries (``mask == 0``) keep a value of 0.
    """

    id: str
    timestamps: np.ndarray  # [T, N]
    values: np.ndarray  # [T, N]
    mask: np.ndarray  # [T, N], 0/1

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def with_arrays(self, values=None, mask=None) -> "Series":
        return dataclasses.replace(
            self,
            values=self.values if values is None else values,
            mask=self.mask if mask is None else mask,
        )


@dataclass(frozen=True)
class SeriesSet:
    features: tuple[str, ...]
    series: tuple[Series, ...] = ()
    norm_stats: dict | None = None

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    def __getitem__(self, i) -> Series:
        return self.series[i]

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def n_observed(self) -> int:
        return sum(s.n_observed for s in self.series)

    @property
    def n_steps(self) -> int:
        return sum(s.length for s in self.series)

    def subset(self, indices: Iterable[int]) -> "SeriesSet":
        return dataclasses.replace(self, series=tuple(self.series[i] for i in indices))

    def replace_series(self, series: Sequence[Series]) -> "SeriesSet":
        return dataclasses.replace(self, series=tuple(series))


# ---------------------------------------------------------------------------
# time gaps
# ---------------------------------------------------------------------------


def compute_time_gaps(timestamps, mask, reverse: bool = False) -> np.ndarray:
    """Elapsed time since each feature was last observed.

    ``delta[0] = 0``; afterwards the gap to the previous step is added to the
    running gap when the previous step was missing, and restarts otherwise.
    With ``reverse=True`` the gaps are computed for the time-reversed series
    and returned in reversed step order.
    """
    s = np.asarray(timestamps, dtype=np.float64)
    m = np.asarray(mask)
    if s.ndim == 1:
        s, m = s[:, None], m[:, None]
        squeeze = True
    else:
        squeeze = False
    if s.shape != m.shape:
        raise ValueError(f"timestamps {s.shape} and mask {m.shape} differ in shape")
    if reverse:
        s, m = -s[::-1], m[::-1]
    steps = np.diff(s, axis=0)
    if (steps < 0).any():
        t = int(np.argwhere(steps < 0)[0, 0]) + 1
        raise ValueError(f"timestamps decrease at step {t}")
    delta = np.zeros_like(s)
    for t in range(1, s.shape[0]):
        delta[t] = steps[t - 1] + np.where(m[t - 1] == 0, delta[t - 1], 0.0)
    return delta[:, 0] if squeeze else delta


# ---------------------------------------------------------------------------
# event files
# ---------------------------------------------------------------------------


def read_variables(path) -> list[str]:
    """Variable order from a sidecar file: one name per line or comma separated."""
    text = Path(path).read_text(encoding="utf-8")
    names = [v.strip() for line in text.splitlines() for v in line.split(",")]
    names = [v for v in names if v]
    if len(set(names)) != len(names):
        raise EventFileError(f"{path}: duplicate variable names")
    return names


def parse_events(path, variables: Sequence[str] | None = None) -> SeriesSet:
    """Read an event CSV into a SeriesSet.

    Variables follow ``variables`` when given, otherwise first-occurrence
    order. Rows sharing ``(series_id, timestamp)`` form one step. A repeated
    ``(series_id, timestamp, variable)`` keeps the last value; the number of
    such repeats is reported once as a warning.
    """
    declared = list(variables) if variables is not None else None
    var_index: dict[str, int] = {v: i for i, v in enumerate(declared or [])}
    # series_id -> {timestamp -> {var_idx: value}}
    grouped: dict[str, dict[float, dict[int, float]]] = {}
    duplicates = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return SeriesSet(features=tuple(declared or ()))
        if tuple(h.strip() for h in header) != EVENT_HEADER:
            raise EventFileError(f"line 1: expected header {','.join(EVENT_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise EventFileError(f"line {line}: expected 4 fields, got {len(row)}")
            sid, ts, var, val = (c.strip() for c in row)
            try:
                t = float(ts)
                v = float(val)
            except ValueError:
                raise EventFileError(f"line {line}: non-numeric timestamp or value") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise EventFileError(f"line {line}: non-finite timestamp or value")
            if not sid or not var:
                raise EventFileError(f"line {line}: empty series_id or variable")
            if var not in var_index:
                if declared is not None:
                    raise EventFileError(f"line {line}: undeclared variable {var!r}")
                var_index[var] = len(var_index)
            steps = grouped.setdefault(sid, {})
            obs = steps.setdefault(t, {})
            j = var_index[var]
            if j in obs:
                duplicates += 1
            obs[j] = v
    if duplicates:
        warnings.warn(f"{duplicates} duplicate (series, timestamp, variable) rows; kept the last")
    features = tuple(declared) if declared is not None else tuple(var_index)
    n = len(features)
    out = []
    for sid, steps in grouped.items():
        times = sorted(steps)
        values = np.zeros((len(times), n))
        mask = np.zeros((len(times), n))
        for t_i, t in enumerate(times):
            for j, v in steps[t].items():
                values[t_i, j] = v
                mask[t_i, j] = 1.0
        ts = np.repeat(np.asarray(times, dtype=np.float64)[:, None], n, axis=1)
        out.append(Series(sid, ts, values, mask))
    return SeriesSet(features=features, series=tuple(out))


def write_events(series_set: SeriesSet, path, observed_only: bool = True) -> None:
    """Write one row per entry; ``observed_only=False`` writes every (step, variable)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for s in series_set:
            for t in range(s.length):
                for j, name in enumerate(series_set.features):
                    if observed_only and not s.mask[t, j]:
                        continue
                    w.writerow((s.id, repr(float(s.timestamps[t, j])), name, repr(float(s.values[t, j]))))


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def feature_stats(series_set: SeriesSet) -> dict[str, dict[str, float]]:
    n = series_set.n_features
    total = np.zeros(n)
    count = np.zeros(n)
    for s in series_set:
        total += (s.values * s.mask).sum(axis=0)
        count += s.mask.sum(axis=0)
    if (count == 0).any():
        missing = series_set.features[int(np.argmax(count == 0))]
        raise ValueError(f"feature {missing!r} has no observed entries")
    mean = total / count
    sq = np.zeros(n)
    for s in series_set:
        sq += (((s.values - mean) ** 2) * s.mask).sum(axis=0)
    std = np.sqrt(sq / count)
    return {
        f: {"mean": float(mean[j]), "std": float(max(std[j], STD_FLOOR))}
        for j, f in enumerate(series_set.features)
    }


def _stat_arrays(series_set: SeriesSet, stats) -> tuple[np.ndarray, np.ndarray]:
    try:
        mean = np.array([stats[f]["mean"] for f in series_set.features])
        std = np.array([stats[f]["std"] for f in series_set.features])
    except KeyError as e:
        raise ValueError(f"no normalisation stats for feature {e.args[0]!r}") from None
    return mean, np.maximum(std, STD_FLOOR)


def normalize(series_set: SeriesSet, stats=None) -> tuple[SeriesSet, dict]:
    """Standardise observed entries per feature (population std, floored).

    Stats are estimated from ``series_set`` unless given.
    """
    if stats is None:
        stats = feature_stats(series_set)
    mean, std = _stat_arrays(series_set, stats)
    out = [s.with_arrays(values=np.where(s.mask > 0, (s.values - mean) / std, 0.0)) for s in series_set]
    return dataclasses.replace(series_set, series=tuple(out), norm_stats=stats), stats


def denormalize(series_set: SeriesSet, stats=None, all_entries: bool = False) -> SeriesSet:
    stats = stats or series_set.norm_stats
    if stats is None:
        raise ValueError("series set carries no normalisation stats")
    mean, std = _stat_arrays(series_set, stats)
    out = []
    for s in series_set:
        raw = s.values * std + mean
        out.append(s.with_arrays(values=raw if all_entries else np.where(s.mask > 0, raw, 0.0)))
    return dataclasses.replace(series_set, series=tuple(out), norm_stats=None)


def save_stats(stats, path) -> None:
    Path(path).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_stats(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# hold-out masking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSplit:
    """Entries hidden from the model and scored afterwards."""

    eval_masks: tuple[np.ndarray, ...]
    rate: float
    seed: int

    @property
    def n_points(self) -> int:
        return int(sum(m.sum() for m in self.eval_masks))

    def subset(self, indices: Iterable[int]) -> "EvalSplit":
        return dataclasses.replace(self, eval_masks=tuple(self.eval_masks[i] for i in indices))

    def blind(self, series_set: SeriesSet) -> SeriesSet:
        """Training view: held-out entries become missing."""
        if len(series_set) != len(self.eval_masks):
            raise ValueError("eval split and series set differ in length")
        out = []
        for s, em in zip(series_set, self.eval_masks):
            mask = s.mask * (1 - em)
            out.append(s.with_arrays(values=s.values * mask, mask=mask))
        return series_set.replace_series(out)


@dataclass(frozen=True)
class HeldOut:
    """Model input with held-out entries hidden, next to the full truth."""

    input: SeriesSet
    truth: SeriesSet
    split: EvalSplit


def holdout_mask(series_set: SeriesSet, rate: float, seed: int) -> EvalSplit:
    """Hide ``floor(rate * n_observed)`` observed entries drawn uniformly over the set.

    A series that would lose every observation keeps its earliest one.
    """
    if not 0 < rate < 1:
        raise ValueError("rate must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    owners, flat_pos = [], []
    for i, s in enumerate(series_set):
        idx = np.flatnonzero(s.mask.ravel() > 0)
        owners.append(np.full(idx.size, i))
        flat_pos.append(idx)
    owners = np.concatenate(owners) if owners else np.zeros(0, int)
    flat_pos = np.concatenate(flat_pos) if flat_pos else np.zeros(0, int)
    k = int(math.floor(rate * owners.size))
    chosen = rng.choice(owners.size, size=k, replace=False) if k else np.zeros(0, int)
    masks = [np.zeros_like(s.mask) for s in series_set]
    for c in chosen:
        masks[owners[c]].ravel()[flat_pos[c]] = 1.0
    for s, em in zip(series_set, masks):
        if s.n_observed and (s.mask * (1 - em)).sum() == 0:
            first = np.flatnonzero(s.mask.ravel() > 0)[0]
            em.ravel()[first] = 0.0
    return EvalSplit(eval_masks=tuple(masks), rate=rate, seed=seed)


def split_indices(n: int, seed: int, ratios=(8, 1, 1)) -> tuple[list[int], list[int], list[int]]:
    """Seeded train/validation/test partition of series indices."""
    perm = np.random.default_rng(seed).permutation(n)
    total = sum(ratios)
    n_val = int(round(n * ratios[1] / total))
    n_test = int(round(n * ratios[2] / total))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n} series are too few for a {ratios} split")
    return (
        sorted(perm[:n_train].tolist()),
        sorted(perm[n_train : n_train + n_val].tolist()),
        sorted(perm[n_train + n_val :].tolist()),
    )


def thin_observations(series_set: SeriesSet, keep: float, seed: int) -> SeriesSet:
    """Randomly keep a fraction ``keep`` of every series' observed entries."""
    rng = np.random.default_rng(seed)
    out = []
    for s in series_set:
        drop = (rng.random(s.mask.shape) >= keep) & (s.mask > 0)
        mask = s.mask * ~drop
        if s.n_observed and mask.sum() == 0:
            first = np.flatnonzero(s.mask.ravel() > 0)[0]
            mask.ravel()[first] = 1.0
        out.append(s.with_arrays(values=s.values * mask, mask=mask))
    return series_set.replace_series(out)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_series: int = 64
    n_features: int = 6
    t_range: tuple[int, int] = (24, 48)
    obs_rate: float = 0.25
    seed: int = 0
    n_factors: int = 2
    n_regimes: int = 4
    noise: float = 0.1
    mean_gap: float = 1.0


def synth_generate(config: SynthConfig) -> SeriesSet:
    """Seeded irregular series built from shared low-rank latent signals.

    Each series belongs to one of ``n_regimes`` families; a family fixes the
    frequency, phase and trend of every latent factor up to per-series
    jitter. Features load on the latent factors through one dataset-wide
    matrix, so they are correlated within a step. Step times follow a
    Poisson process; each entry is revealed with probability ``obs_rate``.
    """
    if not 0 < config.obs_rate <= 1:
        raise ValueError("obs_rate must lie in (0, 1]")
    lo, hi = config.t_range
    if not 1 <= lo <= hi:
        raise ValueError("t_range must satisfy 1 <= lo <= hi")
    rng = np.random.default_rng(config.seed)
    n, r = config.n_features, config.n_factors
    loadings = rng.normal(size=(n, r)) / math.sqrt(r)
    offsets = rng.normal(scale=0.5, size=n)
    freq = rng.uniform(0.05, 0.25, size=(config.n_regimes, r))
    phase = rng.uniform(0, 2 * math.pi, size=(config.n_regimes, r))
    trend = rng.normal(scale=0.5, size=(config.n_regimes, r))
    amp = rng.uniform(0.7, 1.5, size=(config.n_regimes, r))

    features = tuple(f"f{j}" for j in range(n))
    out = []
    for i in range(config.n_series):
        regime = rng.integers(config.n_regimes)
        length = int(rng.integers(lo, hi + 1))
        gaps = rng.exponential(config.mean_gap, size=length - 1)
        times = np.concatenate([[0.0], np.cumsum(gaps)])
        f = freq[regime] * rng.uniform(0.9, 1.1, size=r)
        ph = phase[regime] + rng.normal(scale=0.3, size=r)
        a = amp[regime] * rng.uniform(0.8, 1.2, size=r)
        span = max(times[-1], 1.0)
        latent = a * np.sin(2 * math.pi * f * times[:, None] + ph) + trend[regime] * times[:, None] / span
        values = latent @ loadings.T + offsets + rng.normal(scale=config.noise, size=(length, n))
        mask = (rng.random((length, n)) < config.obs_rate).astype(np.float64)
        if mask.sum() == 0:
            mask.ravel()[rng.integers(mask.size)] = 1.0
        ts = np.repeat(times[:, None], n, axis=1)
        out.append(Series(f"s{i:04d}", ts, values * mask, mask))
    return SeriesSet(features=features, series=tuple(out))
