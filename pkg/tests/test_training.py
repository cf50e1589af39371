import json

import numpy as np
import pytest
import torch

from prime_impute.config import TrainConfig
from prime_impute.data import HeldOut, SynthConfig, holdout_mask, synth_generate
from prime_impute.evaluation import prepare
from prime_impute.model import make_batch
from prime_impute.numerics import float64_mode
from prime_impute.training import (
    Checkpoint,
    CheckpointError,
    TrainingDiverged,
    fit,
    load_checkpoint,
    predict,
    save_checkpoint,
    total_loss,
)
from toys import full_loss_gradient_errors, toy_model, toy_set

TINY = dict(hidden_size=8, n_prototypes=3, batch_size=4, epochs=3, seed=0)


@pytest.fixture(scope="module")
def tiny_experiment():
    data = synth_generate(SynthConfig(n_series=10, n_features=3, t_range=(6, 10), obs_rate=0.6, seed=3))
    return prepare(data, seed=3)


def fake_outputs(batch, x_hat, pred, H=None):
    step = {"pred_h": pred, "pred_f": pred}
    return {"x_hat": x_hat, "fwd": step, "bwd": step, "H": H}


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def test_perfect_predictions_zero_loss(f64):
    model = toy_model(K=2, margin=1.0)
    batch = make_batch(list(toy_set(0, n_series=1, T=2)))
    reps = torch.tensor([[0.0, 0.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0]])
    model.bank.load_centroids(reps.numpy())
    # the two valid steps sit exactly on the two prototypes, which are 3 > margin apart
    out = fake_outputs(batch, batch.x, batch.x, H=reps[None])
    loss, parts = total_loss(out, batch, model)
    assert loss.item() == 0.0
    assert all(v.item() == 0.0 for v in parts.values())


def test_ablation_reduces_to_final_term(f64):
    model = toy_model(disable_prototypes=True, lambda_pgru=0.0)
    batch = make_batch(list(toy_set(1)))
    out = fake_outputs(batch, batch.x + 1.0, batch.x + 5.0)
    loss, parts = total_loss(out, batch, model)
    assert loss.item() == pytest.approx(1.0, abs=1e-15)
    assert set(parts) == {"final", "forward", "backward", "total"}


def test_hand_weighted_sum(f64):
    model = toy_model(K=2, margin=2.0, lambda_pgru=0.3, lambda_s2p=1.0, lambda_p2s=0.1, lambda_sep=0.1)
    model.bank.load_centroids(np.array([[0.0, 0, 0, 0], [1.0, 0, 0, 0]]))
    batch = make_batch(list(toy_set(0, n_series=1, T=2, N=1, rate=1.0)))
    # two observed entries; final errors (1, -1), recurrent errors (2, 0) for both h and f
    x_hat = batch.x + torch.tensor([1.0, -1.0]).view(1, 2, 1)
    pred = batch.x + torch.tensor([2.0, 0.0]).view(1, 2, 1)
    H = torch.tensor([[[0.0, 3.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]])
    loss, parts = total_loss(fake_outputs(batch, x_hat, pred, H), batch, model)
    final = (1 + 1) / 2
    recurrent = 2 * ((4 + 0) / 2 + (4 + 0) / 2)
    s2p = 3.0 + 0.0  # nearest prototypes at distance 3 and 0
    # one-to-one: prototype 0 -> step 0 (3), prototype 1 -> step 1 (0) beats 1 + sqrt(10)
    p2s = 3.0
    sep = 2 * (2.0 - 1.0)
    expected = final + 0.3 * recurrent + s2p + 0.1 * p2s + 0.1 * sep
    assert parts["final"].item() == pytest.approx(final)
    assert parts["s2p"].item() == pytest.approx(s2p)
    assert parts["p2s"].item() == pytest.approx(p2s)
    assert parts["sep"].item() == pytest.approx(sep)
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_padded_steps_excluded_from_loss(f64):
    model = toy_model(disable_prototypes=True)
    series = list(toy_set(2, n_series=2))
    short = series[0].with_arrays()
    short = type(short)(short.id, short.timestamps[:3], short.values[:3], short.mask[:3])
    alone = make_batch([short])
    both = make_batch([short, series[1]])
    out_alone = fake_outputs(alone, alone.x + 1, alone.x)
    out_both = fake_outputs(both, both.x + 1, both.x)
    la, _ = total_loss(out_alone, alone, model)
    lb, _ = total_loss(out_both, both, model)
    assert la.item() == pytest.approx(1.0) and lb.item() == pytest.approx(1.0)


def test_no_observed_entries_rejected(f64):
    model = toy_model(disable_prototypes=True)
    s = list(toy_set(0, n_series=1))[0]
    s = s.with_arrays(values=np.zeros_like(s.values), mask=np.zeros_like(s.mask))
    batch = make_batch([s])
    with pytest.raises(ValueError, match="no observed"):
        total_loss(fake_outputs(batch, batch.x, batch.x), batch, model)


def test_full_objective_gradients(f64):
    errors = full_loss_gradient_errors(seed=0)
    assert max(errors.values()) < 1e-4, max(errors, key=errors.get)


def test_cluster_losses_only_reach_prototypes(f64):
    model = toy_model(lambda_pgru=0.0)
    batch = make_batch(list(toy_set(0)))
    out = model(batch)
    _, parts = total_loss(out, batch, model)
    (parts["s2p"] + parts["p2s"] + parts["sep"]).backward()
    for name, p in model.named_parameters():
        if name.startswith("bank."):
            assert p.grad is not None and p.grad.abs().sum() > 0
        else:
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, name


def test_imputation_loss_reaches_prototypes(f64):
    model = toy_model()
    batch = make_batch(list(toy_set(0)))
    _, parts = total_loss(model(batch), batch, model)
    parts["final"].backward()
    assert model.bank.P.grad.abs().sum() > 0


def test_small_step_descends(f64):
    model = toy_model(seed=4)
    batch = make_batch(list(toy_set(4, n_series=1)))
    loss, _ = total_loss(model(batch), batch, model)
    loss.backward()
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is not None:
                p -= 1e-6 * p.grad
    after, _ = total_loss(model(batch), batch, model)
    assert after.item() < loss.item()


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def test_one_epoch_history(tiny_experiment):
    cfg = TrainConfig(**{**TINY, "epochs": 1})
    result = fit(tiny_experiment.train, cfg, tiny_experiment.val)
    assert len(result.history) == 1
    row = result.history[0]
    assert set(row) == {"epoch", "train_loss", "val_mse", "val_mae", "prototypes_active"}
    assert result.best_epoch == 0 and np.isfinite(row["val_mse"])


def test_feature_map_diagonal_zero_after_training(tiny_experiment):
    result = fit(tiny_experiment.train, TrainConfig(**TINY))
    for direction in (result.model.rnn.fwd, result.model.rnn.bwd):
        assert torch.count_nonzero(torch.diagonal(direction.W_f)) == 0


def test_validation_selection(tiny_experiment):
    cfg = TrainConfig(**{**TINY, "epochs": 6, "learning_rate": 0.02})
    result = fit(tiny_experiment.train, cfg, tiny_experiment.val)
    vals = [h["val_mse"] for h in result.history]
    assert result.best_epoch == int(np.argmin(vals))
    preds = predict(result.model, tiny_experiment.val.input, result.prototypes_active)
    err = np.concatenate([(p - s.values)[em > 0] for p, s, em in
                          zip(preds, tiny_experiment.val.truth, tiny_experiment.val.split.eval_masks)])
    assert float(np.mean(err**2)) == pytest.approx(min(vals), rel=1e-6)


def test_same_seed_same_trajectory(tiny_experiment):
    a = fit(tiny_experiment.train, TrainConfig(**TINY), tiny_experiment.val)
    b = fit(tiny_experiment.train, TrainConfig(**TINY), tiny_experiment.val)
    assert a.history == b.history
    for (n, p), (_, q) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(p, q), n


def test_start_at_last_epoch_equals_no_prototypes(tiny_experiment):
    late = fit(tiny_experiment.train, TrainConfig(**{**TINY, "prototype_start_epoch": TINY["epochs"]}),
               tiny_experiment.val)
    off = fit(tiny_experiment.train, TrainConfig(**{**TINY, "disable_prototypes": True}), tiny_experiment.val)
    assert not late.prototypes_active and not off.prototypes_active
    assert [h["val_mse"] for h in late.history] == [h["val_mse"] for h in off.history]
    for a, b in zip(predict(late.model, tiny_experiment.test.input, False),
                    predict(off.model, tiny_experiment.test.input, False)):
        assert np.array_equal(a, b)


def test_prototypes_switch_on_at_start_epoch(tiny_experiment):
    cfg = TrainConfig(**{**TINY, "epochs": 4, "prototype_start_epoch": 2})
    result = fit(tiny_experiment.train, cfg, tiny_experiment.val)
    assert [h["prototypes_active"] for h in result.history] == [False, False, True, True]
    assert result.model.bank.initialized


def test_too_many_prototypes_rejected(tiny_experiment):
    with pytest.raises(ValueError, match="prototypes"):
        fit(tiny_experiment.train, TrainConfig(**{**TINY, "n_prototypes": 100_000}))


def test_divergence_aborts_with_finite_state(tiny_experiment):
    cfg = TrainConfig(**{**TINY, "learning_rate": 1e30, "epochs": 5})
    with pytest.raises(TrainingDiverged) as info:
        fit(tiny_experiment.train, cfg, tiny_experiment.val)
    for p in info.value.result.model.parameters():
        assert torch.isfinite(p).all()


def test_empty_training_set_rejected(tiny_experiment):
    with pytest.raises(ValueError, match="empty"):
        fit(tiny_experiment.train.subset([]), TrainConfig(**TINY))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tiny_experiment):
    result = fit(tiny_experiment.train, TrainConfig(**TINY), tiny_experiment.val)
    return Checkpoint(result.model, tiny_experiment.train.features, tiny_experiment.stats,
                      result.prototypes_active, result.best_epoch, {"val_mse": result.best_val_mse})


def test_round_trip_reproduces_outputs(trained, tiny_experiment, tmp_path):
    save_checkpoint(trained, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.config == trained.config
    assert loaded.features == trained.features and loaded.norm_stats == trained.norm_stats
    assert loaded.prototypes_active == trained.prototypes_active
    for a, b in zip(predict(trained.model, tiny_experiment.test.input, trained.prototypes_active),
                    predict(loaded.model, tiny_experiment.test.input, loaded.prototypes_active)):
        assert np.array_equal(a, b)


def test_resave_is_byte_identical(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_manifest_contents(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["gelu"] == "exact"
    assert manifest["optimizer"] == {"name": "adam", "betas": [0.9, 0.999], "eps": 1e-8}
    names = {p["name"] for p in manifest["parameters"]}
    assert "bank.P" in names
    bank = next(p for p in manifest["parameters"] if p["name"] == "bank.P")
    raw = np.fromfile(tmp_path / "ck" / bank["file"], dtype="<f4").reshape(bank["shape"])
    assert np.array_equal(raw, trained.model.bank.P.detach().numpy().astype("<f4"))


def test_truncated_file_names_parameter(trained, tmp_path):
    path = save_checkpoint(trained, tmp_path / "ck")
    target = path / "rnn.fwd.W_h.f32"
    target.write_bytes(target.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match=r"rnn\.fwd\.W_h"):
        load_checkpoint(path)


def test_version_mismatch_rejected(trained, tmp_path):
    path = save_checkpoint(trained, tmp_path / "ck")
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["version"] = 99
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)


def test_missing_manifest_and_file(trained, tmp_path):
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(tmp_path)
    path = save_checkpoint(trained, tmp_path / "ck")
    (path / "bank.P.f32").unlink()
    with pytest.raises(CheckpointError, match="bank.P"):
        load_checkpoint(path)


def test_shape_mismatch_rejected(trained, tmp_path):
    path = save_checkpoint(trained, tmp_path / "ck")
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["parameters"][0]["shape"] = [1, 1, 1]
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_float64_model_round_trip_through_float32(tmp_path):
    with float64_mode():
        model = toy_model()
        ck = Checkpoint(model, ("f0", "f1"), None, True)
        save_checkpoint(ck, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    for (n, p), (_, q) in zip(model.state_dict().items(), loaded.model.state_dict().items()):
        assert torch.equal(p.float(), q), n
