import numpy as np
import pytest

from meladapt.autodiff import Tensor
from meladapt.errors import NumericError, ShapeError
from meladapt.optim import AdamState, LrSchedule, adam_step


def make_state(lr=0.1):
    return AdamState(learning_rate=lr)


def test_zero_grad_is_noop():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    adam_step({"w": p}, {"w": np.zeros(3)}, make_state())
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_single_step_closed_form():
    # fresh state, g=1 everywhere: update reduces to lr*ghat where
    # ghat = (g/(1-b1)) / (sqrt(g^2/(1-b2)) + eps) evaluated at t=1.
    # frozen from a 50-digit evaluation of that expression
    expected_delta = 0.09999999990000007
    p = Tensor(np.array([0.0, 5.0]))
    adam_step({"w": p}, {"w": np.ones(2)}, make_state(lr=0.1))
    np.testing.assert_allclose(p.data, [-expected_delta, 5.0 - expected_delta], rtol=1e-15)


def test_two_steps_same_gradient_keep_moving():
    p = Tensor(np.array([0.0]))
    state = make_state(lr=0.1)
    adam_step({"w": p}, {"w": np.ones(1)}, state)
    after_one = p.data.copy()
    adam_step({"w": p}, {"w": np.ones(1)}, state)
    assert p.data[0] < after_one[0] < 0.0
    assert state.t == 2


def test_bitwise_determinism():
    def run():
        rng = np.random.default_rng(77)
        p = Tensor(rng.normal(size=(4, 3)))
        state = make_state(lr=0.01)
        for _ in range(25):
            adam_step({"w": p}, {"w": rng.normal(size=(4, 3))}, state)
        return p.data

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_state_buffers_track_parameters():
    p = Tensor(np.zeros((2, 2)))
    q = Tensor(np.zeros(3))
    state = make_state()
    adam_step({"w": p, "b": q}, {"w": np.ones((2, 2)), "b": np.ones(3)}, state)
    assert set(state.m) == {"w", "b"}
    assert state.m["w"].shape == (2, 2)
    assert state.v["b"].shape == (3,)


def test_nonfinite_gradient_aborts_before_mutation():
    p = Tensor(np.array([1.0, 2.0]))
    q = Tensor(np.array([3.0]))
    state = make_state()
    grads = {"w": np.array([0.1, np.nan]), "b": np.array([0.1])}
    with pytest.raises(NumericError, match="w"):
        adam_step({"w": p, "b": q}, grads, state, group_of=lambda n: "decoder")
    # nothing was applied, t untouched
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    np.testing.assert_array_equal(q.data, [3.0])
    assert state.t == 0


def test_nonfinite_error_names_group():
    p = Tensor(np.array([1.0]))
    with pytest.raises(NumericError, match="decoder"):
        adam_step({"w": p}, {"w": np.array([np.inf])}, make_state(),
                  group_of=lambda n: "decoder")


def test_shape_mismatch_rejected():
    p = Tensor(np.zeros(3))
    with pytest.raises(ShapeError):
        adam_step({"w": p}, {"w": np.zeros(4)}, make_state())


def test_missing_grad_key_rejected():
    p = Tensor(np.zeros(3))
    with pytest.raises(ShapeError, match="w"):
        adam_step({"w": p}, {}, make_state())


class TestSchedule:
    def test_constant(self):
        s = LrSchedule(kind="constant", value=2e-4)
        assert s.at(1) == s.at(10_000) == 2e-4

    def test_inverse_sqrt_warmup_then_decay(self):
        s = LrSchedule(kind="inverse_sqrt", value=1.0, warmup=100)
        # linear ramp during warmup
        assert s.at(50) == pytest.approx(50 * 100 ** -1.5)
        # peak at warmup boundary, then decays as step^-1/2
        assert s.at(100) == pytest.approx(100 ** -0.5)
        assert s.at(400) == pytest.approx(400 ** -0.5)
        assert s.at(100) > s.at(101) > s.at(400)

    def test_monotone_after_warmup(self):
        s = LrSchedule(kind="inverse_sqrt", value=0.5, warmup=10)
        vals = [s.at(i) for i in range(10, 200)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
