import dataclasses

import numpy as np
import pytest

from formanttcn import model as M
from formanttcn import trainer as TR
from formanttcn.dataset import Utterance, normalize_sets, prepare_utterance
from formanttcn.dsp import FeatureMatrix
from formanttcn.synth import steady_spec, synthesize

SMALL = M.ModelConfig(channels=8, input_dim=10, head_width=12)


def utterance(n, dim=10, seed=0, speech=None, targets=None, name=None):
    rng = np.random.default_rng(seed)
    feats = FeatureMatrix(rng.standard_normal((n, dim)), np.ones(n, bool))
    if targets is None:
        targets = np.tile([500.0, 1500.0, 2500.0], (n, 1))
    speech = np.ones(n, bool) if speech is None else speech
    return Utterance(name or f"u{seed}", feats, np.asarray(targets, float), speech)


# -- schedule and optimizer ------------------------------------------------------------

def test_lr_schedule():
    assert TR.lr_schedule(1) == 0.001
    assert TR.lr_schedule(50) == 0.001
    assert TR.lr_schedule(51) == 0.0005
    assert TR.lr_schedule(100) == 0.0005
    with pytest.raises(ValueError):
        TR.lr_schedule(0)


def test_adam_first_step():
    params = {"w": np.array([1.0, -2.0])}
    TR.adam_step(params, {"w": np.array([0.5, -3.0])}, TR.AdamState(), 0.001)
    np.testing.assert_allclose(params["w"], [1.0 - 0.0009999998, -2.0 + 0.001], rtol=0, atol=1e-9)
    assert 1.0 - params["w"][0] == pytest.approx(0.001 * 0.5 / (0.5 + 1e-7), rel=1e-12)


def test_adam_zero_gradient():
    params = {"w": np.array([0.3, 0.7])}
    TR.adam_step(params, {"w": np.zeros(2)}, TR.AdamState(), 0.001)
    np.testing.assert_array_equal(params["w"], [0.3, 0.7])


def scalar_adam(theta, steps, lr=0.001, b1=0.9, b2=0.999, eps=1e-7):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = 2.0 * (theta - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (vhat ** 0.5 + eps)
        trace.append(theta)
    return trace


def test_adam_scalar_trace():
    params = {"w": np.array([0.0])}
    state = TR.AdamState()
    trace = []
    for _ in range(10):
        TR.adam_step(params, {"w": 2.0 * (params["w"] - 3.0)}, state, 0.001)
        trace.append(params["w"][0])
    np.testing.assert_allclose(trace, scalar_adam(0.0, 10), rtol=0, atol=1e-12)
    assert state.t == 10 and np.all(state.v["w"] >= 0)


def test_adam_random_trace():
    rng = np.random.default_rng(0)
    theta0 = rng.standard_normal(5)
    grads = rng.standard_normal((20, 5))
    params = {"w": theta0.copy()}
    state = TR.AdamState()
    for g in grads:
        TR.adam_step(params, {"w": g.copy()}, state, 0.01)
    for i in range(5):
        th, m, v = theta0[i], 0.0, 0.0
        for t, g in enumerate(grads[:, i], 1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            th -= 0.01 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-7)
        assert params["w"][i] == pytest.approx(th, abs=1e-12)


def test_adam_non_finite_gradient_named():
    params = {"a": np.zeros(2), "b": np.zeros(2)}
    with pytest.raises(TR.NumericalError, match="b"):
        TR.adam_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, TR.AdamState(), 0.1)
    np.testing.assert_array_equal(params["a"], 0.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(batch_utterances=0)
    with pytest.raises(ValueError):
        TR.TrainConfig(lr_initial=-1.0)


# -- batching --------------------------------------------------------------------------

def test_batch_sizes():
    utts = [utterance(20 + i, seed=i) for i in range(10)]
    batches = TR.make_batches(utts, 4, 710, seed=0)
    assert [len(b.names) for b in batches] == [4, 4, 2]
    assert all(b.x.shape[1] == 710 for b in batches)
    assert sorted(n for b in batches for n in b.names) == sorted(u.name for u in utts)


def test_padding_masked():
    b = TR.make_batches([utterance(100)], 4, 710)[0]
    assert b.mask[0, :100].all() and not b.mask[0, 100:].any()
    np.testing.assert_array_equal(b.x[0, 100:], 0.0)


def test_silent_ends_masked():
    speech = np.ones(100, bool)
    speech[:5] = speech[95:] = False
    b = TR.make_batches([utterance(100, speech=speech)], 4, 710)[0]
    np.testing.assert_array_equal(np.flatnonzero(b.mask[0]), np.arange(5, 95))


def test_batch_errors():
    with pytest.raises(ValueError, match="empty"):
        TR.make_batches([], 4, 710)
    with pytest.raises(ValueError, match="711"):
        TR.make_batches([utterance(711)], 4, 710)


def test_shuffle_seeded_per_epoch():
    utts = [utterance(10, seed=i) for i in range(12)]
    order = lambda seed, epoch: [n for b in TR.make_batches(utts, 4, 20, seed, epoch) for n in b.names]
    assert order(1, 1) == order(1, 1)
    assert order(1, 1) != order(1, 2)
    assert order(1, 1) != order(2, 1)


# -- training loop ---------------------------------------------------------------------

def short_cfg(**kw):
    return TR.TrainConfig(**{"max_epochs": 4, "max_frames": 60, "seed": 3, **kw})


def test_train_records_and_best_selection(tmp_path):
    train = [utterance(40, seed=i) for i in range(6)]
    val = [utterance(30, seed=10 + i) for i in range(2)]
    best, records = TR.train(SMALL, short_cfg(), train, val, checkpoint=tmp_path / "ck.bin")
    assert [r.epoch for r in records] == [1, 2, 3, 4]
    val_best = TR.evaluate_loss(best, val, short_cfg())
    assert val_best == pytest.approx(min(r.val_loss for r in records), rel=1e-12)
    assert M.to_bytes(M.load(tmp_path / "ck.bin")) == M.to_bytes(best)
    TR.write_record_csv(tmp_path / "rec.csv", records)
    lines = (tmp_path / "rec.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr,seconds" and len(lines) == 5


def test_train_deterministic():
    train = [utterance(40, seed=i) for i in range(5)]
    val = [utterance(30, seed=9)]
    w1, r1 = TR.train(SMALL, short_cfg(max_epochs=3), train, val)
    w2, r2 = TR.train(SMALL, short_cfg(max_epochs=3), train, val)
    assert M.to_bytes(w1) == M.to_bytes(w2)
    strip = lambda rs: [dataclasses.replace(r, seconds=0.0) for r in rs]
    assert strip(r1) == strip(r2)


def test_lr_drop_recorded():
    train = [utterance(20, seed=0)]
    _, records = TR.train(SMALL, short_cfg(max_epochs=3, lr_drop_epoch=2), train, train)
    assert [r.lr for r in records] == [0.001, 0.001, 0.0005]


def test_non_finite_loss_identified():
    bad = utterance(30, seed=1)
    bad.features.values[4, 2] = np.nan
    with pytest.raises(TR.NumericalError, match="epoch 1, batch 0"):
        TR.train(SMALL, short_cfg(), [bad], [utterance(30, seed=2)])


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        TR.train(SMALL, short_cfg(), [], [utterance(10)])


def test_constant_target_overfit():
    # overfit setting: no dropout, lr lowered to 1e-4 after epoch 100
    u = synthesize(steady_spec((620, 1480, 2710), duration=0.6, seed=1))
    _, train = normalize_sets([prepare_utterance(u.clip, u.track)])
    cfg = TR.TrainConfig(max_epochs=200, seed=0, lr_after_epoch50=1e-4, lr_drop_epoch=100)
    losses = []
    TR.train(M.ModelConfig(dropout_p=0.0), cfg, train, train,
             on_epoch=lambda r: losses.append(r.train_loss))
    assert min(losses) < 0.01
