import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosda import diffmath as dm
from cosda.errors import DimensionError
from cosda.losses import (SIGN_MODES, adaptation_loss_tape, consistency_loss, mi_loss, mi_loss_tape,
                          mutual_information, total_loss)


def batch(seed, b=None, c=None, temp=1.0):
    r = np.random.default_rng(seed)
    b = b or int(r.integers(1, 65))
    c = c or int(r.integers(2, 11))
    return dm.softmax(r.standard_normal((b, c)) / temp)


def test_consistency_examples():
    p = batch(0, 5, 3)
    assert consistency_loss(p, p) == 0.0
    assert consistency_loss([[1.0, 0.0]], [[0.5, 0.5]]) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(DimensionError):
        consistency_loss(np.ones((2, 3)) / 3, np.ones((3, 3)) / 3)


def test_consistency_is_batch_mean():
    p, q = batch(1, 4, 3), batch(2, 4, 3)
    rows = [dm.kl_divergence(p[i], q[i]) for i in range(4)]
    assert consistency_loss(p, q) == pytest.approx(np.mean(rows), abs=1e-15)


def test_mi_examples():
    same = np.tile([[0.2, 0.5, 0.3]], (4, 1))
    assert mutual_information(same).mi_eq3 == 0.0
    br = mutual_information([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(br.marginal, [0.5, 0.5])
    assert br.mi_eq3 == pytest.approx(-math.log(2), abs=1e-15)
    assert br.mean_instance_entropy == 0.0
    assert br.marginal_entropy == pytest.approx(math.log(2), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 5.0))
def test_mi_decomposition_identity(seed, temp):
    br = mutual_information(batch(seed, temp=temp))
    assert abs(br.mi_eq3 - (br.mean_instance_entropy - br.marginal_entropy)) < 1e-9
    assert br.mi_eq3 <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sign_modes_are_negations(seed):
    p = batch(seed)
    assert mi_loss(p, "paper") == -mi_loss(p, "standard_im")


def test_identical_rows_zero_in_both_modes():
    p = np.tile([[0.1, 0.9]], (3, 1))
    for mode in SIGN_MODES:
        assert mi_loss(p, mode) == 0.0
    with pytest.raises(ValueError):
        mi_loss(p, "other")


def test_marginal_kl_mode_descent_pulls_rows_to_marginal():
    # gradient descent on a free 2-row logit table under the printed sign
    z = np.array([[3.0, -1.0, 0.5], [-2.0, 2.5, 0.0]])
    for _ in range(3000):
        tape = dm.GradientTape()
        v = tape.watch(z)
        loss = mi_loss_tape(tape, v, "paper")
        z = z - 0.5 * tape.gradient(loss, [v])[0]
    p = dm.softmax(z)
    assert -mutual_information(p).mi_eq3 < 1e-4


def test_total_loss_examples():
    assert total_loss(1.3, 5.0, 0.0) == 1.3
    assert total_loss(1.0, 2.0, 0.5) == 2.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.1)


@pytest.mark.parametrize("mode", SIGN_MODES)
def test_tape_loss_matches_recomputation(mode, rng):
    logits = rng.standard_normal((16, 4))
    p_tilde = dm.softmax(rng.standard_normal((16, 4)) / 0.07)
    tape = dm.GradientTape()
    total, cons, mi = adaptation_loss_tape(tape, p_tilde, tape.watch(logits), 1.0, mode)
    q = dm.softmax(logits)
    assert cons.value == pytest.approx(consistency_loss(p_tilde, q), abs=1e-12)
    assert mi.value == pytest.approx(mi_loss(q, mode), abs=1e-12)
    assert total.value == pytest.approx(total_loss(consistency_loss(p_tilde, q), mi_loss(q, mode), 1.0), abs=1e-12)


def test_tape_consistency_gradient_matches_fd(rng):
    logits = rng.standard_normal((5, 3))
    p_tilde = dm.softmax(rng.standard_normal((5, 3)))
    tape = dm.GradientTape()
    v = tape.watch(logits)
    total, _, _ = adaptation_loss_tape(tape, p_tilde, v, 0.7, "standard_im")
    g = tape.gradient(total, [v])[0]
    fd = dm.finite_difference_gradient(
        lambda z: consistency_loss(p_tilde, dm.softmax(z)) + 0.7 * mi_loss(dm.softmax(z), "standard_im"), logits)
    np.testing.assert_allclose(g, fd, atol=1e-8)
