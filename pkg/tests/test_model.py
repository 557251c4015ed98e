import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings, strategies as st

from arrayloc.model import (FrameDataset, ModelError, NetworkConfig,
                            Prediction, SpeakerLocNet, TrainerConfig,
                            TrainingError, batch_loss, gradient_check,
                            load_checkpoint, loss_terms, predict,
                            predict_batch, save_checkpoint,
                            save_loss_history, target_confidence, train)

TINY = NetworkConfig(in_channels=2, conv_channels=(4, 4, 8, 8, 8, 16, 512),
                     fc_dims=(32, 16, 8, 8), head_hidden=8)


def _make_dataset(rng, n=64, n_channels=2, separable=True):
    """Tiny learnable task: active samples carry a position-dependent
    two-channel level pattern, silent samples are noise."""
    feats = rng.normal(0.0, 0.1, size=(n, n_channels, 64, 64)).astype(np.float32)
    active = np.arange(n) % 2 == 0
    x = rng.uniform(0.1, 0.9, size=n)
    if separable:
        for i in range(n):
            if active[i]:
                feats[i, 0] += 2.0 * x[i]
                feats[i, -1] += 2.0 * (1.0 - x[i])
    onehot = np.zeros((n, 11), dtype=np.float32)
    onehot[:, 0] = 1.0
    x = np.where(active, x, 0.5)
    return FrameDataset(feats, onehot, active, x)


def test_network_config_validation():
    with pytest.raises(ModelError):
        NetworkConfig(conv_channels=(4, 4, 8, 8, 8, 16))       # 6 layers
    with pytest.raises(ModelError):
        NetworkConfig(conv_channels=(4, 4, 8, 8, 8, 16, 256))  # wrong end width
    with pytest.raises(ModelError):
        NetworkConfig(dropout_rate=1.0)


def test_zero_parameters_give_half_outputs():
    net = SpeakerLocNet(TINY)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    net.eval()
    pred = predict(net, np.zeros((2, 64, 64)), np.eye(11)[0])
    assert pred.x_hat == pytest.approx(0.5)
    assert pred.c_hat == pytest.approx(0.5)


def test_eval_forward_deterministic(rng):
    torch.manual_seed(0)
    net = SpeakerLocNet(TINY)
    net.eval()
    feats = rng.normal(size=(3, 2, 64, 64))
    oh = np.tile(np.eye(11)[1], (3, 1))
    a = predict_batch(net, feats, oh)
    b = predict_batch(net, feats, oh)
    assert np.array_equal(a, b)


def test_forward_shape_validation():
    net = SpeakerLocNet(TINY)
    with pytest.raises(ModelError):
        net(torch.zeros(1, 3, 64, 64), torch.zeros(1, 11))
    with pytest.raises(ModelError):
        net(torch.zeros(1, 2, 64, 64), torch.zeros(1, 7))


def test_outputs_always_in_unit_range(rng):
    torch.manual_seed(3)
    net = SpeakerLocNet(TINY)
    with torch.no_grad():
        for p in net.parameters():
            p.mul_(10.0)  # push activations hard
    net.eval()
    feats = rng.normal(0, 5, size=(8, 2, 64, 64))
    oh = np.eye(11)[rng.integers(0, 11, size=8)]
    out = predict_batch(net, feats, oh)
    assert np.all(out >= 0.0) and np.all(out <= 1.0)


def test_target_confidence_examples():
    assert target_confidence(True, 0.5, 0.5) == 1.0
    assert target_confidence(False, None, 0.9) == 0.0
    assert target_confidence(True, 0.3, 0.5) == pytest.approx(0.8)


def test_target_confidence_validates_range():
    with pytest.raises(ModelError):
        target_confidence(True, 1.5, 0.5)


def test_loss_examples():
    total, pos, conf = loss_terms(Prediction(0.5, 1.0), True, 0.5)
    assert total == 0.0
    total, pos, conf = loss_terms(Prediction(0.2, 0.0), False)
    assert total == 0.0
    total, pos, conf = loss_terms(Prediction(0.5, 0.9), True, 0.3)
    assert pos == pytest.approx(0.04)
    assert conf == pytest.approx(0.01)
    assert total == pytest.approx(0.05)


@settings(deadline=None)
@given(active=st.booleans(),
       x=st.floats(0.0, 1.0), x_hat=st.floats(0.0, 1.0), c_hat=st.floats(0.0, 1.0))
def test_loss_nonnegative_and_zero_iff(active, x, x_hat, c_hat):
    # keep squared terms away from float underflow so "zero iff" is exact
    assume(x == x_hat or abs(x - x_hat) > 1e-12)
    assume(c_hat == 0.0 or c_hat > 1e-12)
    assume(c_hat == 1.0 or c_hat < 1.0 - 1e-12)
    total, _, _ = loss_terms(Prediction(x_hat, c_hat), active, x if active else None)
    assert total >= 0.0
    c = target_confidence(active, x if active else None, x_hat)
    assert 0.0 <= c <= 1.0
    if active:
        assert (total == 0.0) == (x == x_hat and c_hat == 1.0)
    else:
        assert (total == 0.0) == (c_hat == 0.0)


def test_batch_loss_matches_scalar_loss(rng):
    n = 16
    x_hat = rng.uniform(0, 1, n)
    c_hat = rng.uniform(0, 1, n)
    active = rng.random(n) > 0.5
    x = rng.uniform(0, 1, n)
    out = torch.tensor(np.stack([x_hat, c_hat], axis=1))
    batched = batch_loss(out, torch.tensor(active), torch.tensor(x)).numpy()
    for i in range(n):
        expected, _, _ = loss_terms(Prediction(x_hat[i], c_hat[i]), bool(active[i]),
                                    x[i] if active[i] else None)
        assert batched[i] == pytest.approx(expected, rel=1e-9)


def test_gradient_check_full_small_config(rng):
    torch.manual_seed(7)
    net = SpeakerLocNet(TINY)
    feats = rng.normal(size=(2, 64, 64))
    err = gradient_check(net, feats, np.eye(11)[2], active=True, x=0.3,
                         n_params=200, rng_seed=5)
    assert err < 1e-4


def test_gradient_check_inactive_sample(rng):
    torch.manual_seed(8)
    net = SpeakerLocNet(TINY)
    feats = rng.normal(size=(2, 64, 64))
    err = gradient_check(net, feats, np.eye(11)[0], active=False, x=None,
                         n_params=100, rng_seed=6)
    assert err < 1e-4


def test_gradient_check_zero_input_finite():
    torch.manual_seed(9)
    net = SpeakerLocNet(TINY)
    err = gradient_check(net, np.zeros((2, 64, 64)), np.eye(11)[0],
                         active=True, x=0.5, n_params=100, rng_seed=7)
    assert np.isfinite(err)
    assert err < 1e-4


def test_overfits_single_sample(rng):
    ds = _make_dataset(rng, n=1)
    cfg = TrainerConfig(epochs=25, batch_size=1, learning_rate=1e-3, rng_seed=1)
    _, history = train(ds, TINY, cfg)
    assert history[-1] < history[0]


def test_training_deterministic(rng):
    ds = _make_dataset(rng, n=32)
    cfg = TrainerConfig(epochs=3, batch_size=8, rng_seed=11)
    net_a, hist_a = train(ds, TINY, cfg)
    net_b, hist_b = train(ds, TINY, cfg)
    assert hist_a == hist_b
    for pa, pb in zip(net_a.parameters(), net_b.parameters()):
        assert torch.equal(pa, pb)


def test_smoke_training_loss_non_increasing(rng):
    ds = _make_dataset(rng, n=128)
    cfg = TrainerConfig(epochs=5, batch_size=32, learning_rate=2e-4, rng_seed=2)
    _, history = train(ds, TINY, cfg)
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_nan_features_raise_training_error(rng):
    ds = _make_dataset(rng, n=8)
    ds.features[0] = np.nan
    cfg = TrainerConfig(epochs=1, batch_size=8, rng_seed=0)
    with pytest.raises(TrainingError) as err:
        train(ds, TINY, cfg)
    assert err.value.epoch == 0


def test_empty_dataset_rejected():
    ds = FrameDataset(np.zeros((0, 2, 64, 64)), np.zeros((0, 11)),
                      np.zeros(0, dtype=bool), np.zeros(0))
    with pytest.raises(ModelError):
        train(ds, TINY, TrainerConfig(epochs=1))


def test_view_onehot_changes_trained_output(rng):
    # Same features labeled at different positions per view: the trained
    # net must consult the one-hot.
    n = 96
    feats = np.zeros((n, 2, 64, 64), dtype=np.float32)
    feats += rng.normal(0, 0.05, size=feats.shape)
    feats[:, 0] += 1.0
    onehot = np.zeros((n, 11), dtype=np.float32)
    views = np.where(np.arange(n) % 2 == 0, 0, 3)
    onehot[np.arange(n), views] = 1.0
    x = np.where(views == 0, 0.15, 0.85)
    ds = FrameDataset(feats, onehot, np.ones(n, dtype=bool), x)
    cfg = TrainerConfig(epochs=40, batch_size=32, learning_rate=2e-3, rng_seed=4)
    net, _ = train(ds, TINY, cfg)
    probe = feats[:1]
    out0 = predict_batch(net, probe, np.eye(11)[[0]])[0, 0]
    out3 = predict_batch(net, probe, np.eye(11)[[3]])[0, 0]
    assert abs(out0 - out3) > 0.2
    assert out0 < out3


def test_checkpoint_round_trip(tmp_path, rng):
    ds = _make_dataset(rng, n=16)
    cfg = TrainerConfig(epochs=2, batch_size=8, rng_seed=3)
    net, _ = train(ds, TINY, cfg)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, net, cfg, config_hash="c0ffee", stats_hash="5ad")
    loaded, meta = load_checkpoint(path)
    assert meta["config_hash"] == "c0ffee"
    assert meta["stats_hash"] == "5ad"
    feats = rng.normal(size=(4, 2, 64, 64))
    oh = np.tile(np.eye(11)[0], (4, 1))
    assert np.array_equal(predict_batch(net, feats, oh),
                          predict_batch(loaded, feats, oh))
    # byte-determinism of the format
    path2 = tmp_path / "model2.ckpt"
    save_checkpoint(path2, net, cfg, config_hash="c0ffee", stats_hash="5ad")
    assert path.read_bytes() == path2.read_bytes()


def test_loss_history_csv(tmp_path):
    path = tmp_path / "loss.csv"
    save_loss_history(path, [0.5, 0.25], config_hash="ff")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config=ff"
    assert lines[1] == "epoch,mean_loss"
    assert lines[2] == "0,0.5"


def test_dataset_length_mismatch_rejected():
    with pytest.raises(ModelError):
        FrameDataset(np.zeros((3, 2, 64, 64)), np.zeros((2, 11)),
                     np.zeros(3, dtype=bool), np.zeros(3))
