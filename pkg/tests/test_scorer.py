import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlebm.evaluation import auc
from dlebm.scorer import (PARAM_ORDER, ConvScorer, TrainConfig, UndersizedVolumeError,
                          balanced_class_weights, class_balanced_bce, gradient_check, train)
from dlebm.volume import Volume


def two_blob(n=60, seed=0):
    rng = np.random.default_rng(seed)
    g = np.stack(np.meshgrid(*[np.arange(16.0)] * 3, indexing="ij"))
    blob = np.exp(-((g - 5.0) ** 2).sum(0) / 8.0)
    y = np.arange(n) % 2
    X = 0.1 * rng.standard_normal((n, 16, 16, 16)) + 0.3 + y[:, None, None, None] * blob
    return X, y


@pytest.fixture(scope="module")
def blob_run():
    X, y = two_blob()
    return X, y, train(ConvScorer(8, 16, seed=0), X, y, TrainConfig(epochs=30, seed=0))


# -- forward ---------------------------------------------------------------------

def test_zero_dense_gives_half(rng):
    s = ConvScorer(2, 3, seed=1)
    s.params["dense_w"][:] = 0.0
    for _ in range(3):
        assert s.forward(Volume(rng.normal(size=(8, 9, 10)))) == 0.5


@pytest.mark.parametrize("c1,c2", [(1, 1), (2, 3)])
def test_constant_field_hand_arithmetic(c1, c2):
    # positive constant weights on a constant 8^3 input: every pooling window
    # contains a voxel with the full 27-tap neighbourhood, so after each block
    # the field is constant again and equals (input * 27 * w * channels + b)
    c, w1, b1, w2, b2, wd, bd = 0.5, 0.01, 0.02, 0.03, -0.01, 0.7, 0.1
    s = ConvScorer(c1, c2)
    s.params["conv1_w"][:] = w1
    s.params["conv1_b"][:] = b1
    s.params["conv2_w"][:] = w2
    s.params["conv2_b"][:] = b2
    s.params["dense_w"][:] = wd
    s.params["dense_b"][:] = bd
    a1 = c * 27 * w1 + b1
    a2 = a1 * 27 * w2 * c1 + b2
    z = wd * a2 * c2 + bd
    assert s.forward(Volume(np.full((8, 8, 8), c))) == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-9)


def test_undersized_volume():
    with pytest.raises(UndersizedVolumeError):
        ConvScorer(2, 2).forward(Volume(np.zeros((3, 8, 8))))
    ConvScorer(2, 2).forward(Volume(np.zeros((4, 4, 4))))


@settings(max_examples=15)
@given(st.integers(0, 2**31), st.floats(0.1, 50))
def test_output_in_open_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    p = ConvScorer(2, 2, seed=seed).predict(rng.normal(scale=scale, size=(2, 8, 8, 8)))
    assert np.all((p > 0) & (p < 1))


def test_forward_deterministic(rng):
    v = Volume(rng.random((10, 10, 10)))
    assert ConvScorer(4, 8, seed=3).forward(v) == ConvScorer(4, 8, seed=3).forward(v)


# -- loss ---------------------------------------------------------------------------

def test_class_weights_25_75():
    w0, w1 = balanced_class_weights([1] * 25 + [0] * 75)
    assert w1 == 2.0 and w0 == pytest.approx(2 / 3, abs=1e-15)


def test_bce_worked_batch():
    p = [0.8, 0.3, 0.6, 0.1]
    y = [1, 0, 0, 1]
    w0, w1 = 2 / 3, 2.0
    hand = -(w1 * math.log(0.8) + w0 * math.log(0.7) + w0 * math.log(0.4) + w1 * math.log(0.1)) / 4
    assert class_balanced_bce(p, y, (w0, w1)) == pytest.approx(hand, abs=1e-12)


def test_bce_balanced_is_plain_and_perfect_is_zero():
    y = [0, 1, 1, 0]
    assert balanced_class_weights(y) == (1.0, 1.0)
    p = np.array([0.2, 0.9, 0.6, 0.4])
    plain = -np.mean(np.where(np.array(y) == 1, np.log(p), np.log(1 - p)))
    assert class_balanced_bce(p, y) == pytest.approx(plain, abs=1e-15)
    assert class_balanced_bce([0.0, 1.0, 1.0, 0.0], y) <= 1e-10


def test_single_class_rejected():
    with pytest.raises(ValueError):
        balanced_class_weights([1, 1, 1])
    with pytest.raises(ValueError):
        train(ConvScorer(2, 2), np.zeros((3, 8, 8, 8)), [0, 0, 0])


# -- training -----------------------------------------------------------------------

def test_two_blob_training(blob_run):
    X, y, res = blob_run
    assert auc(res.scorer.predict(X), y) >= 0.95
    assert res.loss_trace[10] < res.loss_trace[0]
    assert len(res.loss_trace) == 30


def test_zero_epochs_unchanged(rng):
    s = ConvScorer(2, 2, seed=5)
    r = train(s, rng.random((4, 8, 8, 8)), [0, 1, 0, 1], TrainConfig(epochs=0))
    assert r.loss_trace == []
    for k in PARAM_ORDER:
        assert np.array_equal(r.scorer.params[k], s.params[k])


def test_training_deterministic_and_pure(rng):
    X = rng.random((6, 8, 8, 8))
    X0 = X.copy()
    s = ConvScorer(2, 2, seed=2)
    w0 = {k: v.copy() for k, v in s.params.items()}
    a = train(s, X, [0, 1] * 3, TrainConfig(epochs=3, batch_size=4, seed=9))
    b = train(s, X, [0, 1] * 3, TrainConfig(epochs=3, batch_size=4, seed=9))
    assert a.loss_trace == b.loss_trace
    for k in PARAM_ORDER:
        assert np.array_equal(a.scorer.params[k], b.scorer.params[k])
        assert np.array_equal(s.params[k], w0[k])
    assert np.array_equal(X, X0)


# -- gradients ------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(6))
def test_gradient_check_toy(seed):
    v = Volume(np.random.default_rng(seed).random((8, 8, 8)))
    assert gradient_check(ConvScorer(2, 2, seed=seed), v, seed % 2) < 1e-4


def test_gradient_check_weighted_loss():
    v = Volume(np.random.default_rng(1).random((8, 8, 8)))
    assert gradient_check(ConvScorer(2, 2, seed=1), v, 1, class_weights=(2 / 3, 2.0)) < 1e-4


def test_gradient_check_dense_path():
    s = ConvScorer(2, 2, seed=4)
    s.params["conv1_w"][:] = 0.0
    s.params["conv2_w"][:] = 0.0
    s.params["conv1_b"][:] = 0.3
    s.params["conv2_b"][:] = 0.2
    v = Volume(np.random.default_rng(4).random((8, 8, 8)))
    smooth = ("conv1_b", "conv2_b", "dense_w", "dense_b")
    assert gradient_check(s, v, 0, params=smooth) < 1e-6


# -- serialization ----------------------------------------------------------------------

def test_save_load_roundtrip(tmp_path, rng):
    s = ConvScorer(3, 5, seed=11)
    s.save(tmp_path / "w")
    t = ConvScorer.load(tmp_path / "w")
    assert (t.c1, t.c2, t.seed) == (3, 5, 11)
    for k in PARAM_ORDER:
        assert np.array_equal(s.params[k], t.params[k])
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:4] == b"CSW1"
    (tmp_path / "w.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        ConvScorer.load(tmp_path / "w")
