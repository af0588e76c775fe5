import math

import numpy as np
import pytest

from mmrobust.adversary import AttackConfig
from mmrobust.data import Dataset
from mmrobust.diffcore import RngStream
from mmrobust.models import MLP, SRNN, MlpConfig, ParameterSet, SrnnConfig, dropout_mask
from mmrobust.training import (
    METHODS,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    adam_step,
    batch_gradient,
    train,
)


def blobs(n=200, seed=0, sep=1.5):
    r = RngStream(seed)
    y = np.arange(n) % 3
    centers = np.array([[sep, 0, 0, 0], [0, sep, 0, 0], [0, 0, sep, 0]])
    x = centers[y] + 0.6 * r.normal((n, 4))
    return Dataset(x, y, 3)


def splits(ds):
    n = len(ds)
    return {"train": ds.subset(np.arange(0, n * 7 // 10)), "val": ds.subset(np.arange(n * 7 // 10, n))}


def small_mlp():
    return MLP(MlpConfig(n_in=4, hidden=(6,), n_classes=3))


def test_adam_zero_gradient_leaves_params():
    ps = ParameterSet({"w": np.array([1.0, -2.0])})
    st = OptimizerState.zeros_like(ps)
    st, out = adam_step(st, ps, {"w": np.zeros(2)}, 0.1)
    assert np.array_equal(out["w"], ps["w"]) and st.step == 1


def test_adam_first_step_has_magnitude_lr():
    ps = ParameterSet({"w": np.array([1.0, 1.0, 1.0])})
    g = np.array([0.5, -3.0, 1e-3])
    _, out = adam_step(OptimizerState.zeros_like(ps), ps, {"w": g}, 0.01)
    np.testing.assert_allclose(out["w"] - 1.0, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_matches_hand_recurrence():
    grads = [0.3, -1.2, 0.7, 0.0, 2.5]
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    ps = ParameterSet({"w": np.array(1.0)})
    st = OptimizerState.zeros_like(ps)
    for g in grads:
        st, ps = adam_step(st, ps, {"w": np.array(g)}, lr)
    assert float(ps["w"]) == pytest.approx(w, rel=1e-14)


def test_adam_rejects_bad_lr():
    ps = ParameterSet({"w": np.zeros(1)})
    with pytest.raises(ValueError):
        adam_step(OptimizerState.zeros_like(ps), ps, {"w": np.zeros(1)}, 0.0)


def test_zero_beta_matches_standard_per_batch():
    m, ds = small_mlp(), blobs(32)
    ps = m.init(RngStream(0))
    std = batch_gradient(m, ps, ds.x, ds.onehot(), TrainConfig(), RngStream(1))
    beta = batch_gradient(m, ps, ds.x, ds.onehot(), TrainConfig(method="beta", beta_rob=0.0), RngStream(1))
    for n in ps:
        assert np.array_equal(std.grads[n], beta.grads[n])


def test_zero_forward_noise_is_standard():
    m, ds = small_mlp(), splits(blobs())
    a, _ = train(m, ds, TrainConfig(method="standard", epochs=2, batch_size=16))
    b, _ = train(m, ds, TrainConfig(method="forward_noise", forward_noise_std=0.0, epochs=2, batch_size=16))
    for n in a:
        assert np.array_equal(a[n], b[n])


def test_separable_toy_reaches_full_train_accuracy():
    r = RngStream(3)
    y = np.arange(50) % 2
    x = r.normal((50, 2)) * 0.3 + np.where(y[:, None] == 1, 1.0, -1.0)
    ds = Dataset(x, y, 2)
    m = MLP(MlpConfig(n_in=2, hidden=(4,), n_classes=2))
    best, hist = train(m, {"train": ds, "val": ds}, TrainConfig(epochs=200, batch_size=10, learning_rate=0.01))
    assert accuracy(m, best, ds) == 1.0


def test_dropout_mask_statistics():
    assert np.array_equal(dropout_mask((4, 5), 0.0, RngStream(0)), np.ones((4, 5)))
    mask = dropout_mask((100_000,), 0.3, RngStream(1))
    assert abs((mask == 0).mean() - 0.3) <= 0.005
    assert abs(mask.mean() - 1.0) <= 0.01
    assert set(np.unique(mask)) == {0.0, 1 / 0.7}
    with pytest.raises(ValueError):
        dropout_mask((2,), 1.0, RngStream(0))


@pytest.mark.parametrize("method", METHODS)
def test_training_is_deterministic(method):
    m, ds = small_mlp(), splits(blobs(90))
    cfg = TrainConfig(method=method, epochs=2, batch_size=32, seed=7, attack=AttackConfig(n_steps=2))
    a, ha = train(m, ds, cfg)
    b, hb = train(m, ds, cfg)
    assert ha == hb
    for n in a:
        assert np.array_equal(a[n], b[n])


def test_seed_changes_result():
    m, ds = small_mlp(), splits(blobs(90))
    a, _ = train(m, ds, TrainConfig(epochs=1, seed=0))
    b, _ = train(m, ds, TrainConfig(epochs=1, seed=1))
    assert not np.array_equal(a["W0"], b["W0"])


def test_best_validation_epoch_is_selected():
    m, ds = small_mlp(), splits(blobs(150))
    snaps = []
    best, hist = train(m, ds, TrainConfig(epochs=6, batch_size=16, learning_rate=0.02), on_epoch=lambda r, p: snaps.append(p.copy()))
    accs = [e["val_acc"] for e in hist["epochs"]]
    assert hist["best_val_acc"] == max(accs)
    k = hist["best_epoch"]
    assert accs[k] == max(accs) and all(a < max(accs) for a in accs[:k])
    for n in best:
        assert np.array_equal(best[n], snaps[k][n])


def test_non_finite_loss_aborts():
    ds = blobs(40)
    ds.x[3, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(small_mlp(), {"train": ds, "val": ds}, TrainConfig(epochs=1, batch_size=8))


def test_config_validation():
    with pytest.raises(ValueError, match="unknown training method"):
        TrainConfig(method="sgd")
    with pytest.raises(ValueError):
        TrainConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)


def test_empty_split_rejected():
    ds = blobs(30)
    with pytest.raises(ValueError):
        train(small_mlp(), {"train": ds, "val": ds.subset(np.arange(0))}, TrainConfig(epochs=1))


def test_beta_uses_n_steps_plus_one_gradient_evaluations():
    m, ds = small_mlp(), splits(blobs(64))
    cfg = dict(epochs=1, batch_size=16)
    _, hs = train(m, ds, TrainConfig(**cfg))
    _, hb = train(m, ds, TrainConfig(method="beta", attack=AttackConfig(n_steps=10), **cfg))
    assert hb["grad_evals"] >= 10 * hs["grad_evals"]
    assert "train_loss_rob" in hb["epochs"][0]


def test_forward_noise_gradient_is_at_clean_parameters():
    # the noisy forward differs from the clean one, but the update applies to the clean weights
    m, ds = small_mlp(), blobs(32)
    ps = m.init(RngStream(0)).astype(np.float64)
    cfg = TrainConfig(method="forward_noise", forward_noise_std=0.3, precision="binary64")
    a = batch_gradient(m, ps, ds.x, ds.onehot(), cfg, RngStream(2))
    b = batch_gradient(m, ps, ds.x, ds.onehot(), TrainConfig(precision="binary64"), RngStream(2))
    assert set(a.grads) == set(ps) and not np.allclose(a.grads["W0"], b.grads["W0"])


def test_dropout_only_at_train_time(rng):
    m = SRNN(SrnnConfig(n_in=2, hidden=5, n_classes=2))
    ps = m.init(rng)
    x = 5 * rng.normal((3, 8, 2))
    assert np.array_equal(m.predict(ps, x), m.predict(ps, x))


def test_srnn_trains_with_clipping():
    r = RngStream(0)
    y = np.arange(40) % 2
    x = np.where(y[:, None, None] == 1, 2.0, 0.0) * np.ones((40, 10, 2)) + 0.1 * r.normal((40, 10, 2))
    ds = Dataset(x, y, 2)
    m = SRNN(SrnnConfig(n_in=2, hidden=6, n_classes=2))
    _, hist = train(m, {"train": ds, "val": ds}, TrainConfig(epochs=3, batch_size=10, grad_clip=1.0, learning_rate=0.01))
    assert all(np.isfinite(e["train_loss"]) for e in hist["epochs"])
