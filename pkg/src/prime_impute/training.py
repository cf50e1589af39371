"""Objective, optimisation loop, prototype lifecycle and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import __version__
from .config import TrainConfig
from .data import HeldOut, SeriesSet
from .model import PRIME, Batch, make_batch
from .numerics import NonFiniteError, assert_finite
from .prototypes import kmeans, loss_cluster, loss_separation

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "prime-checkpoint"
CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``result`` holds the best finite state reached."""

    def __init__(self, message: str, result: "FitResult"):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def masked_mse(err: Tensor, weight: Tensor, count: Tensor) -> Tensor:
    return (err * err * weight).sum() / count


def total_loss(out: dict, batch: Batch, model: PRIME, frozen_reps: Tensor | None = None):
    """Weighted sum of imputation, recurrent, cluster and separation losses.

    Squared errors are averaged over observed entries of the batch. Cluster
    losses see the step representations detached (or ``frozen_reps``), so
    they only move the prototypes. Returns ``(loss, parts)``.
    """
    cfg = model.config
    obs = batch.observed
    count = obs.sum()
    if count.item() == 0:
        raise ValueError("batch has no observed entries")
    x = batch.x
    fwd, bwd = out["fwd"], out["bwd"]
    parts = {
        "final": masked_mse(x - out["x_hat"], obs, count),
        "forward": masked_mse(x - fwd["pred_h"], obs, count) + masked_mse(x - fwd["pred_f"], obs, count),
        "backward": masked_mse(x - bwd["pred_h"], obs, count) + masked_mse(x - bwd["pred_f"], obs, count),
    }
    loss = parts["final"] + cfg.lambda_pgru * (parts["forward"] + parts["backward"])
    if not cfg.disable_prototypes and model.bank.initialized:
        reps = out["H"][batch.valid] if frozen_reps is None else frozen_reps
        assert_finite(reps.detach(), "step representations")
        s2p, p2s = loss_cluster(reps, model.bank)
        sep = loss_separation(model.bank)
        parts.update(s2p=s2p, p2s=p2s, sep=sep)
        loss = loss + cfg.lambda_s2p * s2p + cfg.lambda_p2s * p2s + cfg.lambda_sep * sep
    parts["total"] = loss
    return loss, parts


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    model: PRIME
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    prototypes_active: bool = False
    diverged: bool = False

    @property
    def best_val_mse(self) -> float:
        vals = [h["val_mse"] for h in self.history if h["val_mse"] is not None]
        return min(vals) if vals else math.nan


def iter_batches(series_set: SeriesSet, batch_size: int, order=None):
    order = range(len(series_set)) if order is None else order
    order = list(order)
    for i in range(0, len(order), batch_size):
        yield make_batch([series_set[j] for j in order[i : i + batch_size]])


@torch.no_grad()
def predict(model: PRIME, series_set: SeriesSet, prototypes_active: bool, batch_size: int = 64) -> list[np.ndarray]:
    """Raw final predictions ``[T, N]`` per series (observed entries not merged)."""
    model.eval()
    preds = []
    for batch in iter_batches(series_set, batch_size):
        x_hat = model(batch, prototypes_active)["x_hat"].double().numpy()
        for b, s in enumerate(batch.ids):
            preds.append(x_hat[b, : int(batch.valid[b].sum())])
    return preds


def _heldout_errors(model, held: HeldOut, active: bool, batch_size: int):
    preds = predict(model, held.input, active, batch_size)
    err = np.concatenate([(p - s.values)[em > 0] for p, s, em in zip(preds, held.truth, held.split.eval_masks)])
    return float(np.mean(err**2)), float(np.mean(np.abs(err)))


@torch.no_grad()
def collect_representations(model: PRIME, series_set: SeriesSet, batch_size: int, cap: int, rng) -> np.ndarray:
    """Step representations with prototypes off, reservoir-sampled down to ``cap``."""
    sample: list[np.ndarray] = []
    seen = 0
    for batch in iter_batches(series_set, batch_size):
        H = model(batch, prototypes_active=False)["H"][batch.valid].double().numpy()
        for row in H:
            if seen < cap:
                sample.append(row)
            else:
                j = int(rng.integers(seen + 1))
                if j < cap:
                    sample[j] = row
            seen += 1
    return np.array(sample)


def initialise_prototypes(model: PRIME, series_set: SeriesSet, rng) -> None:
    cfg = model.config
    reps = collect_representations(model, series_set, cfg.batch_size, cfg.warmup_cap, rng)
    if reps.shape[0] < cfg.n_prototypes:
        raise ValueError(
            f"warm-up produced {reps.shape[0]} step representations but {cfg.n_prototypes} "
            "prototypes were requested; provide more training steps or lower n_prototypes"
        )
    centroids, _ = kmeans(reps, cfg.n_prototypes, seed=cfg.seed, max_iters=cfg.kmeans_max_iters)
    model.bank.load_centroids(centroids)


def _snapshot(model: PRIME) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def fit(train_set: SeriesSet, config: TrainConfig, validation: HeldOut | None = None,
        log_every: int = 0) -> FitResult:
    """Train on ``train_set``; keep the parameters with the lowest validation MSE.

    Without ``validation`` (or when it holds no evaluation points) the final
    epoch's parameters are kept.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = PRIME(train_set.n_features, config)
    if not config.disable_prototypes:
        initialise_prototypes(model, train_set, rng)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)

    result = FitResult(model=model)
    best_state, best_mse = _snapshot(model), math.inf
    best_active = False
    for epoch in range(config.epochs):
        active = model.prototypes_usable(epoch >= config.prototype_start_epoch)
        model.train()
        losses = []
        for batch in iter_batches(train_set, config.batch_size, rng.permutation(len(train_set))):
            opt.zero_grad(set_to_none=True)
            try:
                loss, _ = total_loss(model(batch, active), batch, model)
                assert_finite(loss, "loss")
            except NonFiniteError as e:
                model.load_state_dict(best_state)
                result.diverged = True
                result.prototypes_active = best_active
                raise TrainingDiverged(f"training diverged at epoch {epoch}: {e}", result) from None
            loss.backward()
            opt.step()
            model.project()
            losses.append(loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mse": None, "val_mae": None,
               "prototypes_active": active}
        if validation is not None and validation.split.n_points > 0:
            row["val_mse"], row["val_mae"] = _heldout_errors(model, validation, active, config.batch_size)
            score = row["val_mse"]
        else:
            score = -epoch  # keep the latest
        if score < best_mse:
            best_mse, best_state, best_active = score, _snapshot(model), active
            result.best_epoch = epoch
        result.history.append(row)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            logger.info("epoch %d loss %.4f val_mse %s", epoch, row["train_loss"], row["val_mse"])
    model.load_state_dict(best_state)
    result.prototypes_active = best_active
    model.eval()
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: PRIME
    features: tuple[str, ...]
    norm_stats: dict | None
    prototypes_active: bool
    epoch: int = -1
    metrics: dict = field(default_factory=dict)

    @property
    def config(self) -> TrainConfig:
        return self.model.config


def _param_file(name: str) -> str:
    return f"{name}.f32"


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per parameter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = []
    for name, tensor in ckpt.model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        (path / _param_file(name)).write_bytes(arr.tobytes())
        params.append({"name": name, "shape": list(arr.shape), "file": _param_file(name)})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "config": ckpt.config.to_dict(),
        "gelu": ckpt.config.gelu,
        "optimizer": {"name": "adam", "betas": list(ADAM_BETAS), "eps": ADAM_EPS},
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "features": list(ckpt.features),
        "norm_stats": ckpt.norm_stats,
        "prototypes_initialized": bool(ckpt.model.bank.initialized),
        "prototypes_active": bool(ckpt.prototypes_active),
        "parameters": params,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest.json") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}/manifest.json is not valid JSON: {e}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} directory")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {manifest.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    config = TrainConfig.from_dict(manifest["config"])
    features = tuple(manifest["features"])
    model = PRIME(len(features), config)
    expected = model.state_dict()
    listed = {p["name"]: p for p in manifest["parameters"]}
    if set(listed) != set(expected):
        missing = sorted(set(expected) ^ set(listed))
        raise CheckpointError(f"{path}: parameter set mismatch: {', '.join(missing)}")
    state = {}
    for name, ref in expected.items():
        entry = listed[name]
        shape = tuple(entry["shape"])
        if shape != tuple(ref.shape):
            raise CheckpointError(f"parameter {name}: shape {shape} != expected {tuple(ref.shape)}")
        try:
            raw = (path / entry["file"]).read_bytes()
        except FileNotFoundError:
            raise CheckpointError(f"parameter {name}: file {entry['file']} missing") from None
        n = int(np.prod(shape)) if shape else 1
        if len(raw) != 4 * n:
            raise CheckpointError(f"parameter {name}: expected {4 * n} bytes, found {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        state[name] = torch.as_tensor(arr.copy(), dtype=ref.dtype)
    model.load_state_dict(state)
    if manifest["prototypes_initialized"]:
        model.bank.initialized = True
    model.eval()
    return Checkpoint(model, features, manifest.get("norm_stats"), bool(manifest["prototypes_active"]),
                      manifest.get("epoch", -1), manifest.get("metrics", {}))
