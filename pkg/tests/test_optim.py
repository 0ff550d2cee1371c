import numpy as np
import pytest

from flowrl.optim import AdamState, adamw_step
from flowrl.tape import NumericError


def test_zero_grad_zero_decay_is_identity():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState.zeros(3)
    p2, s2 = adamw_step(p, np.zeros(3), state, lr=0.1)
    np.testing.assert_array_equal(p2, p)
    assert s2.step == 1


def test_first_step_unit_magnitude():
    # scalar p=0, g=1, lr=0.1: bias-corrected moments cancel -> p' = -0.1 (up to eps)
    p = np.array([0.0])
    p2, _ = adamw_step(p, np.array([1.0]), AdamState.zeros(1), lr=0.1)
    np.testing.assert_allclose(p2, [-0.1], atol=1e-8)


def test_decay_only_case():
    p = np.array([1.0])
    p2, _ = adamw_step(p, np.array([0.0]), AdamState.zeros(1), lr=0.1,
                       weight_decay=0.01)
    np.testing.assert_allclose(p2, [0.999], rtol=1e-15)


def test_step_counter_increments_by_one():
    p = np.zeros(2)
    state = AdamState.zeros(2)
    for expected in (1, 2, 3):
        p, state = adamw_step(p, np.ones(2), state, lr=0.01)
        assert state.step == expected


def test_matches_reference_recurrence_over_steps():
    # independent scalar recurrence of AdamW written out longhand
    beta1, beta2, lr, eps, wd = 0.9, 0.999, 0.05, 1e-8, 0.01
    p_ref = 0.7
    m = v = 0.0
    rng = np.random.default_rng(5)
    grads = rng.standard_normal(6)
    p = np.array([0.7])
    state = AdamState.zeros(1)
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        p_ref = p_ref - lr * (mh / (np.sqrt(vh) + eps) + wd * p_ref)
        p, state = adamw_step(p, np.array([g]), state, lr=lr, beta1=beta1,
                              beta2=beta2, weight_decay=wd, eps=eps)
        np.testing.assert_allclose(p, [p_ref], rtol=1e-14)


def test_nonfinite_grads_abort():
    with pytest.raises(NumericError):
        adamw_step(np.zeros(1), np.array([np.nan]), AdamState.zeros(1), lr=0.1)


def test_inputs_not_mutated():
    p = np.ones(2)
    g = np.ones(2)
    state = AdamState.zeros(2)
    adamw_step(p, g, state, lr=0.1)
    np.testing.assert_array_equal(p, np.ones(2))
    np.testing.assert_array_equal(state.m, np.zeros(2))
    assert state.step == 0
