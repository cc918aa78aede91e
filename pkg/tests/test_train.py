import json
import math

import numpy as np
import pytest

from tagnnpp.autograd import Rng, Tensor
from tagnnpp.data import collate
from tagnnpp.errors import ConfigError, TrainingDiverged
from tagnnpp.model import ModelConfig, TAGNNPlusPlus
from tagnnpp.synthetic import markov_corpus
from tagnnpp.train import (
    AGC_EXEMPT,
    Adam,
    TrainConfig,
    agc_clip,
    compute_gradients,
    cross_entropy,
    fit,
    lr_schedule,
    split_validation,
    train_step,
)


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(T(np.zeros((3, 4))), [1, 2, 4])
        assert float(loss.data) == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct_goes_to_zero(self):
        logits = np.full((1, 5), -50.0)
        logits[0, 2] = 50.0
        assert float(cross_entropy(T(logits), [3]).data) < 1e-40

    def test_scalar_oracle_and_gradient(self):
        x = np.array([[0.3, -1.2, 2.0], [1.0, 1.0, -0.5]])
        labels = [3, 1]
        expected = 0.0
        for row, y in zip(x, labels):
            expected -= row[y - 1] - math.log(sum(math.exp(v) for v in row))
        expected /= 2
        logits = T(x, grad=True)
        loss = cross_entropy(logits, labels)
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)
        from tagnnpp.autograd import backward

        backward(loss)
        p = np.exp(x) / np.exp(x).sum(1, keepdims=True)
        p[[0, 1], [2, 0]] -= 1
        np.testing.assert_allclose(logits.grad, p / 2, atol=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(T(np.zeros((1, 3))), [0])


class TestSchedule:
    def test_defaults(self):
        assert lr_schedule(0) == 1e-4
        assert lr_schedule(3) == 1e-5
        assert lr_schedule(14) == 1e-8

    def test_monotone_non_increasing(self):
        values = [lr_schedule(e) for e in range(30)]
        assert all(a >= b for a, b in zip(values, values[1:]))


def agc_oracle(g, w, lam, eps):
    """Column-by-column clipping with explicit loops."""
    g, w = np.array(g, dtype=np.float64), np.asarray(w, dtype=np.float64)
    if g.ndim == 1:
        gn, wn = np.linalg.norm(g), max(np.linalg.norm(w), eps)
        return g * (lam * wn / gn) if gn > lam * wn else g
    out = g.copy()
    for j in range(g.shape[-1]):
        gn = math.sqrt(sum(v * v for v in g[..., j].ravel()))
        wn = max(math.sqrt(sum(v * v for v in w[..., j].ravel())), eps)
        if gn > lam * wn:
            out[..., j] = g[..., j] * (lam * wn / gn)
    return out


class TestAGC:
    def test_small_gradient_untouched(self):
        w = np.ones((3, 2))
        g = np.full((3, 2), 1e-3)
        out = agc_clip({"x": g}, {"x": w})
        assert out["x"] is g

    def test_zero_weights_use_eps_floor(self):
        g = np.array([3.0, 4.0])
        out = agc_clip({"x": g}, {"x": np.zeros(2)}, lam=0.02, eps=1e-3)["x"]
        assert np.linalg.norm(out) == pytest.approx(0.02 * 1e-3, rel=1e-12)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(0)
        for shape in [(5,), (4, 3), (2, 3, 4)]:
            w, g = rng.normal(size=shape), rng.normal(size=shape) * rng.choice([1e-3, 1.0], size=shape[-1])
            out = agc_clip({"x": g}, {"x": w}, lam=0.05)["x"]
            np.testing.assert_allclose(out, agc_oracle(g, w, 0.05, 1e-3), rtol=1e-12, atol=0)

    def test_bound_idempotence_and_shrinking(self):
        rng = np.random.default_rng(1)
        w, g = rng.normal(size=(6, 4)), rng.normal(size=(6, 4)) * 10
        once = agc_clip({"x": g}, {"x": w})["x"]
        limit = 0.02 * np.maximum(np.linalg.norm(w, axis=0), 1e-3)
        assert np.all(np.linalg.norm(once, axis=0) <= limit * (1 + 1e-12))
        assert np.all(np.linalg.norm(once, axis=0) <= np.linalg.norm(g, axis=0))
        twice = agc_clip({"x": once}, {"x": w})["x"]
        np.testing.assert_allclose(twice, once, rtol=1e-12)

    def test_exemptions(self):
        big = np.full((3, 3), 100.0)
        params = {name: np.ones((3, 3)) for name in AGC_EXEMPT + ("readout.W_1",)}
        out = agc_clip({k: big for k in params}, params)
        for name in AGC_EXEMPT:
            assert out[name] is big
        assert np.linalg.norm(out["readout.W_1"]) < np.linalg.norm(big)


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = {"w": T([1.0, -2.0])}
        Adam(p).step({"w": np.zeros(2)}, lr=1e-3)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        p = {"w": T([0.5, 0.5, 0.5])}
        Adam(p).step({"w": np.array([3.0, -0.01, 200.0])}, lr=1e-3)
        np.testing.assert_allclose(p["w"].data, 0.5 - 1e-3 * np.array([1, -1, 1]), atol=1e-9)

    def test_three_step_scalar_oracle(self):
        b1, b2, eps, lr, l2 = 0.9, 0.999, 1e-8, 1e-2, 0.1
        grads = [0.7, -0.2, 1.5]
        w, m, v = 2.0, 0.0, 0.0
        for t, g in enumerate(grads, 1):
            g = g + l2 * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        p = {"w": T([2.0])}
        opt = Adam(p, b1, b2, eps)
        for g in grads:
            opt.step({"w": np.array([g])}, lr=lr, l2=l2)
        assert p["w"].data[0] == pytest.approx(w, abs=1e-12)

    def test_zero_lr_identity(self):
        p = {"w": T([1.0, 2.0])}
        Adam(p).step({"w": np.array([5.0, -5.0])}, lr=0.0, l2=1.0)
        np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])


def tiny_setup(dtype=np.float64, dropout=0.0):
    corpus = markov_corpus(n_sessions=40, n_items=12, n_patterns=3, seed=0)
    cfg = ModelConfig(n_items=corpus.n_items, d=8, heads=2, dropout=dropout)
    return TAGNNPlusPlus.initialize(cfg, seed=0, dtype=dtype), corpus.train_examples()


def test_single_step_reduces_loss():
    model, examples = tiny_setup()
    batch = collate(examples[:32])
    before, _ = compute_gradients(model, batch)
    opt = Adam(model.parameters())
    train_step(model, batch, opt, TrainConfig(), lr=1e-3)
    after, _ = compute_gradients(model, batch)
    assert after < before


def test_padding_row_gradient_is_zero():
    model, examples = tiny_setup()
    _, grads = compute_gradients(model, collate(examples[:16]))
    assert np.all(grads["embedding"][0] == 0)


def test_validation_split():
    examples = list(range(100))
    train, val = split_validation(examples, Rng(3), 0.1)
    assert len(val) == 10 and sorted(train + val) == examples
    assert split_validation(examples, Rng(3), 0.1) == (train, val)


def test_fit_is_deterministic(tmp_path):
    blobs = []
    for run in ("a", "b"):
        model, examples = tiny_setup(np.float32, dropout=0.1)
        fit(model, examples, TrainConfig(epochs=2, batch_size=16, lr=1e-3), run_dir=tmp_path / run)
        blobs.append([(tmp_path / run / f).read_bytes() for f in ("ckpt-epoch0.bin", "ckpt-epoch1.bin", "metrics.jsonl")])
    assert blobs[0] == blobs[1]
    first = json.loads((tmp_path / "a" / "metrics.jsonl").read_text().splitlines()[0])
    assert set(first) == {"epoch", "lr", "train_loss", "val_loss", "val_hr20", "val_mrr20"}
    assert (tmp_path / "a" / "timing.jsonl").exists()


def test_nan_parameter_diverges(tmp_path):
    model, examples = tiny_setup()
    model.params["readout.W_1"].data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        fit(model, examples, TrainConfig(epochs=1, batch_size=16), run_dir=tmp_path)
    assert info.value.batch_index == 0
    dump = json.loads((tmp_path / "diverged.json").read_text())
    assert dump["epoch"] == 0 and dump["example_index"]


def test_invalid_config_lists_every_problem():
    with pytest.raises(ConfigError) as info:
        TrainConfig(batch_size=0, lr=-1.0, beta1=1.5).validate()
    for key in ("batch_size", "lr", "beta1"):
        assert key in str(info.value)


def test_cross_entropy_random_scalar_oracle():
    rng = np.random.default_rng(4)
    x, labels = rng.normal(size=(3, 5)) * 3, [5, 1, 3]
    expected = sum(math.log(sum(math.exp(v) for v in row)) - row[y - 1] for row, y in zip(x, labels)) / 3
    assert abs(float(cross_entropy(T(x), labels).data) - expected) <= 1e-10


@pytest.mark.slow
def test_loss_trend_over_fifty_epochs():
    corpus = markov_corpus(n_sessions=200, n_items=30, n_patterns=5, seed=0)
    model = TAGNNPlusPlus.initialize(ModelConfig(n_items=corpus.n_items, d=32, heads=2), seed=0)
    history = fit(model, corpus.train_examples(), TrainConfig(epochs=50, decay_factor=1.0, val_fraction=0.0))
    loss = np.array([r["train_loss"] for r in history])
    moving = np.convolve(loss, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(moving) < 0)
