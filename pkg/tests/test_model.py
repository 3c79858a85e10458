import math

import numpy as np
import pytest

from cosda import diffmath as dm
from cosda.domains import gen_gaussian_blobs
from cosda.errors import ConfigError, DataError, DegenerateBatchError, DimensionError, StateError
from cosda.model import (EPOCH_BN_AGGREGATION, EpochBnStats, MlpConfig, PretrainConfig, ParamVector,
                         cross_entropy_tape, epoch_bn_stats, forward, forward_tape, init_classifier,
                         load_checkpoint, predict_logits, predict_proba, pretrain, save_checkpoint,
                         supervised_step)
from cosda.optim import SgdState


def model_snapshot(m):
    return m.param_vector().values.copy(), [(a.copy(), b.copy()) for a, b in m.bn_running]


def same_snapshot(a, b):
    return np.array_equal(a[0], b[0]) and all(
        np.array_equal(x, y) and np.array_equal(u, v) for (x, u), (y, v) in zip(a[1], b[1]))


@pytest.mark.parametrize("sizes", [[2], [2, 2], [2, 4, 1], [2, 0, 3]])
def test_invalid_configs(sizes):
    with pytest.raises(ConfigError):
        MlpConfig(sizes)


def test_same_seed_bit_identical():
    a = init_classifier(MlpConfig([3, 8, 4], init_seed=5)).param_vector().values
    b = init_classifier(MlpConfig([3, 8, 4], init_seed=5)).param_vector().values
    c = init_classifier(MlpConfig([3, 8, 4], init_seed=6)).param_vector().values
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_parameter_count_by_layout_enumeration():
    # 2*4 + 4 (affine) + 4 + 4 (BN gain, shift) + 4*3 + 3 (head)
    model = init_classifier(MlpConfig([2, 4, 3]))
    assert model.param_vector().values.size == 35
    assert sum(int(np.prod(s)) for _, s in model.param_vector().layout) == 35


def test_init_scheme():
    model = init_classifier(MlpConfig([4, 5, 3], init_seed=1))
    w = model.params["layer0.weight"]
    assert np.all(np.abs(w) <= 1 / math.sqrt(4))
    assert np.all(model.params["layer0.bias"] == 0)
    assert np.all(model.params["bn0.gain"] == 1) and np.all(model.params["bn0.shift"] == 0)
    mu, var = model.bn_running[0]
    assert np.all(mu == 0) and np.all(var == 1)
    assert model.mode == "train"


def test_fresh_model_proba_rows_sum_to_one(rng):
    model = init_classifier(MlpConfig([2, 6, 3]))
    p = predict_proba(model, rng.standard_normal((10, 2)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_param_vector_roundtrip_bit_exact():
    model = init_classifier(MlpConfig([3, 7, 5, 4], [True, False], init_seed=2))
    pv = model.param_vector()
    copy = model.copy()
    copy.set_param_vector(ParamVector(pv.values.copy(), pv.layout))
    for k in model.params:
        assert np.array_equal(model.params[k], copy.params[k])
    with pytest.raises(DimensionError):
        ParamVector(pv.values[:-1], pv.layout).unflatten()


def test_eval_mode_batch_independent_and_pure(rng):
    model = init_classifier(MlpConfig([2, 8, 8, 3], init_seed=4))
    model.bn_running = [(rng.standard_normal(8), rng.uniform(0.5, 2, 8)) for _ in range(2)]
    model.eval()
    x = rng.standard_normal((12, 2))
    before = model_snapshot(model)
    batch = predict_logits(model, x)
    single = np.vstack([predict_logits(model, x[i:i + 1]) for i in range(12)])
    assert np.array_equal(batch, single)
    assert np.array_equal(batch, predict_logits(model, x))
    assert same_snapshot(before, model_snapshot(model))


def test_train_mode_single_row_rejected():
    model = init_classifier(MlpConfig([2, 4, 2]))
    with pytest.raises(DegenerateBatchError):
        predict_logits(model, np.ones((1, 2)))


def test_width_mismatch():
    model = init_classifier(MlpConfig([2, 4, 2])).eval()
    with pytest.raises(DimensionError):
        predict_logits(model, np.ones((3, 5)))


def test_symmetric_logits_give_half(rng):
    model = init_classifier(MlpConfig([2, 4, 2])).eval()
    model.params["layer1.weight"][:] = 0.0
    np.testing.assert_array_equal(predict_proba(model, rng.standard_normal((3, 2))), 0.5)


def test_argmax_proba_equals_argmax_logits(rng):
    model = init_classifier(MlpConfig([2, 8, 5], init_seed=9)).eval()
    x = rng.standard_normal((40, 2))
    assert np.array_equal(predict_proba(model, x).argmax(1), predict_logits(model, x).argmax(1))


def test_uniform_predictor_loss_is_log_c(rng):
    model = init_classifier(MlpConfig([2, 4, 5]))
    model.params["layer1.weight"][:] = 0.0
    loss = supervised_step(model, rng.standard_normal((8, 2)), rng.integers(0, 5, 8), SgdState(), lr=0.0)
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_lr_zero_leaves_parameters(rng):
    model = init_classifier(MlpConfig([2, 4, 3]))
    before = model.param_vector().values.copy()
    supervised_step(model, rng.standard_normal((8, 2)), rng.integers(0, 3, 8), SgdState(), lr=0.0,
                    weight_decay=1e-2)
    assert np.array_equal(before, model.param_vector().values)


def test_label_out_of_range(rng):
    model = init_classifier(MlpConfig([2, 4, 3]))
    with pytest.raises(DataError):
        supervised_step(model, rng.standard_normal((4, 2)), np.array([0, 1, 2, 3]), SgdState(), 0.1)


def test_supervised_step_needs_train_mode(rng):
    model = init_classifier(MlpConfig([2, 4, 3])).eval()
    with pytest.raises(StateError):
        supervised_step(model, rng.standard_normal((4, 2)), np.zeros(4, dtype=int), SgdState(), 0.1)


def test_separable_blobs_reach_full_accuracy():
    ds = gen_gaussian_blobs(400, 2, [[-2.0, 0.0], [2.0, 0.0]], 0.5, seed=0)
    model = init_classifier(MlpConfig([2, 8, 2], init_seed=0))
    state = SgdState()
    r = np.random.default_rng(0)
    for _ in range(200):
        idx = r.choice(len(ds), 32, replace=False)
        supervised_step(model, ds.features[idx], ds.labels[idx], state, lr=0.05)
    model.commit_epoch_bn()
    model.eval()
    acc = np.mean(predict_proba(model, ds.features).argmax(1) == ds.labels)
    assert acc >= 0.99


def test_cross_entropy_gradient_matches_fd(rng):
    model = init_classifier(MlpConfig([3, 5, 4, 3], init_seed=1))
    x, y = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)
    tape = dm.GradientTape()
    pv_vars = {k: tape.watch(v) for k, v in model.params.items()}
    logits, _ = forward_tape(model, tape, x, pv_vars)
    grads = tape.gradient(cross_entropy_tape(tape, logits, y), list(pv_vars.values()))
    flat = np.concatenate([g.reshape(-1) for g in grads])
    pv = model.param_vector()

    def f(v):
        model.set_param_vector(ParamVector(v, pv.layout))
        ls = dm.log_softmax(forward(model, x, "train")[0])
        return float(-ls[np.arange(6), y].mean())

    fd = dm.finite_difference_gradient(f, pv.values.copy())
    assert np.max(np.abs(flat - fd)) / np.max(np.abs(fd)) < 1e-5


def test_epoch_bn_stats_examples():
    acc = EpochBnStats()
    with pytest.raises(StateError):
        epoch_bn_stats(acc)
    acc.add([(np.array([0.0]), np.array([1.0]))])
    (mu, var), = epoch_bn_stats(acc)
    assert mu[0] == 0.0 and var[0] == 1.0
    acc.add([(np.array([2.0]), np.array([3.0]))])
    (mu, var), = epoch_bn_stats(acc)
    assert mu[0] == 1.0 and var[0] == 2.0
    assert EPOCH_BN_AGGREGATION == "mean_of_batch_stats"


def test_epoch_bn_mean_converges_to_generator_mean():
    r = np.random.default_rng(11)
    true_mu, sigma, b, batches = np.array([1.5, -0.5, 3.0]), 2.0, 32, 400
    acc = EpochBnStats()
    for _ in range(batches):
        xb = true_mu + sigma * r.standard_normal((b, 3))
        _, stats = dm.batchnorm_forward(xb, np.ones(3), np.zeros(3), "train", None)
        acc.add([stats])
    (mu, _), = epoch_bn_stats(acc)
    assert np.all(np.abs(mu - true_mu) <= 3 * sigma / math.sqrt(b * batches))


def test_checkpoint_roundtrip(tmp_path, rng):
    model = init_classifier(MlpConfig([2, 6, 6, 3], [True, False], init_seed=8))
    model.bn_running = [(rng.standard_normal(6), rng.uniform(0.1, 3, 6))]
    model.eval()
    save_checkpoint(model, tmp_path / "m.npz")
    back = load_checkpoint(tmp_path / "m.npz")
    assert back.config == model.config and back.mode == "eval"
    assert same_snapshot(model_snapshot(model), model_snapshot(back))
    x = rng.standard_normal((5, 2))
    assert np.array_equal(predict_logits(model, x), predict_logits(back, x))


def test_pretrain_lr_zero_keeps_parameters(small_sequence):
    source, _ = small_sequence
    model = init_classifier(MlpConfig([2, 8, 2], init_seed=1))
    before = model.param_vector().values.copy()
    pretrain(model, source.train.features, source.train.labels, PretrainConfig(epochs=2, lr=0.0),
             np.random.default_rng(0))
    assert np.array_equal(before, model.param_vector().values)
    assert model.mode == "eval"
