import numpy as np
import pytest

from helpers import central_diff, grad_of, rel_err
from mpcguide.data import MixtureDataset, single_gaussian
from mpcguide.models import (EpsModel, NoisedClassifier, TrainConfig, data_rms, eps_loss, load_checkpoint,
                             read_checkpoint_meta, save_checkpoint, time_embedding, train_classifier, train_eps)


def test_training_is_deterministic(circle_data, sched, small_cfg, small_eps):
    again = train_eps(circle_data, sched, small_cfg)
    assert again.fingerprint() == small_eps.fingerprint()
    assert again.history == small_eps.history


def test_different_seed_changes_weights(circle_data, sched):
    a = train_eps(circle_data, sched, TrainConfig(steps=5, hidden=8, seed=0))
    b = train_eps(circle_data, sched, TrainConfig(steps=5, hidden=8, seed=1))
    assert a.fingerprint() != b.fingerprint()


def test_null_class_dropout_rate(small_eps):
    # 300 steps x 128 examples; binomial sd ~ 0.0016
    assert small_eps.null_fraction == pytest.approx(0.1, abs=0.01)


def test_training_reduces_loss(small_eps, circle_data, sched):
    untrained = EpsModel(sched, 2, 4, small_eps.cfg, data_std=small_eps.data_std)
    rng = lambda: np.random.default_rng(9)
    f = lambda m: lambda z, t, c: m.eps(z, t, c)
    assert eps_loss(f(small_eps), circle_data, sched, 4000, rng(), True) < \
        eps_loss(f(untrained), circle_data, sched, 4000, rng(), True)


def test_classifier_log_probs_normalized(small_classifier):
    z = np.random.default_rng(0).standard_normal((10, 2)) * 3
    for t in (0, 50, 100):
        lp = small_classifier.log_probs(z, t).data
        np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(small_classifier.class_log_prob(z, t, 2).data, lp[:, 2])


def test_classifier_beats_chance(small_classifier, circle_oracle):
    x, labels = circle_oracle.sample(500, np.random.default_rng(1))
    pred = small_classifier.log_probs(x, 0).data.argmax(axis=1)
    assert np.mean(pred == labels) > 0.9


def test_unknown_class_raises(small_eps, small_classifier):
    with pytest.raises(ValueError, match="unknown class id"):
        small_eps.eps(np.zeros((1, 2)), 10, 4)
    with pytest.raises(ValueError, match="unknown class id"):
        small_classifier.class_log_prob(np.zeros((1, 2)), 10, 7)


def test_null_class_aliases(small_eps):
    z = np.ones((3, 2))
    np.testing.assert_array_equal(small_eps.eps(z, 20, None).data, small_eps.eps(z, 20, np.full(3, -1)).data)


def test_time_out_of_range(small_eps):
    with pytest.raises(ValueError):
        small_eps.eps(np.zeros((1, 2)), 101)


def test_input_gradient_matches_finite_differences(small_eps):
    rng = np.random.default_rng(2)
    for _ in range(20):
        z = rng.standard_normal(2)
        t = int(rng.integers(1, 101))
        g = grad_of(lambda zt: (small_eps.eps(zt, t, 1) * small_eps.eps(zt, t, 1)).sum(), z)
        fd = central_diff(lambda v: float((small_eps.eps(v, t, 1).data ** 2).sum()), z)
        assert rel_err(g, fd) < 1e-5


def test_preconditioned_zero_network_is_gaussian_optimum(sched):
    cfg = TrainConfig(steps=1, hidden=8)
    m = EpsModel(sched, 2, 1, cfg, data_std=1.3)
    m.params[f"W{cfg.depth}"][:] = 0
    m.params[f"b{cfg.depth}"][:] = 0
    z = np.random.default_rng(3).standard_normal((4, 2))
    for t in (1, 50, 100):
        a, s = sched.alpha[t], sched.sigma[t]
        np.testing.assert_allclose(m.eps(z, t).data, s * z / (a * a * 1.69 + s * s), rtol=1e-12)


def test_data_rms():
    d = MixtureDataset([[0.0, 0.0]], [1.0], [1.0], x=np.array([[3.0, 4.0]]), labels=np.array([0]))
    assert data_rms(d) == pytest.approx(np.sqrt(12.5))


def test_non_finite_loss_raises(sched):
    d = single_gaussian().with_samples(100, np.random.default_rng(0))
    d.x[:] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite"):
        train_eps(d, sched, TrainConfig(steps=3, hidden=8))


def test_empty_dataset_rejected(sched):
    with pytest.raises(ValueError, match="no samples"):
        train_eps(single_gaussian(), sched, TrainConfig(steps=1))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(drop_prob=1.5)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)


def test_time_embedding():
    e = time_embedding([0, 50, 100], 100, 8)
    assert e.shape == (3, 16)
    np.testing.assert_allclose(e[0, :8], 0.0)
    np.testing.assert_allclose(e[0, 8:], 1.0)


@pytest.mark.parametrize("which", ["eps", "classifier"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, small_eps, small_classifier, which):
    model = small_eps if which == "eps" else small_classifier
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, {"note": "x"})
    loaded = load_checkpoint(path)
    assert type(loaded) is type(model)
    assert loaded.fingerprint() == model.fingerprint()
    assert loaded.sched == model.sched and loaded.cfg == model.cfg and loaded.history == model.history
    z = np.random.default_rng(0).standard_normal((5, 2))
    if which == "eps":
        np.testing.assert_array_equal(loaded.eps(z, 33, 1).data, model.eps(z, 33, 1).data)
    else:
        np.testing.assert_array_equal(loaded.log_probs(z, 33).data, model.log_probs(z, 33).data)
    assert read_checkpoint_meta(path)["extra"] == {"note": "x"}
    save_checkpoint(tmp_path / "again.npz", loaded, {"note": "x"})
    assert (tmp_path / "again.npz").read_bytes() == path.read_bytes()


def test_checkpoint_version_checked(tmp_path, small_eps):
    import io
    import json

    path = tmp_path / "m.npz"
    save_checkpoint(path, small_eps)
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays["meta"].tobytes())
    meta["version"] = 99
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
