import numpy as np
import pytest

from profitq.optim import EmaState, SgdState, cosine_lr, ema_update, sgd_step


class TestSgd:
    def test_zero_lr_bitwise_unchanged(self, rng):
        p = rng.normal(size=(3, 3))
        before = p.copy()
        state = SgdState(lr=0.0, momentum=0.9, velocity=[rng.normal(size=(3, 3))])
        sgd_step([p], [rng.normal(size=(3, 3))], state)
        assert p.tobytes() == before.tobytes()

    def test_plain_step(self):
        p = np.array([1.0])
        state = SgdState(lr=0.1, momentum=0.0, velocity=[np.zeros(1)])
        sgd_step([p], [np.ones(1)], state)
        np.testing.assert_allclose(p, [0.9], atol=1e-15)

    def test_two_momentum_steps(self):
        # v1 = 1, v2 = 0.9 + 1 = 1.9; total displacement 2.9
        p = np.array([0.0])
        state = SgdState(lr=1.0, momentum=0.9, velocity=[np.zeros(1)])
        sgd_step([p], [np.ones(1)], state)
        sgd_step([p], [np.ones(1)], state)
        np.testing.assert_allclose(p, [-2.9], atol=1e-15)

    def test_shape_mismatch(self):
        state = SgdState(lr=0.1, momentum=0.0, velocity=[np.zeros(2)])
        with pytest.raises(ValueError):
            sgd_step([np.zeros(2)], [np.zeros(3)], state)

    def test_invalid_hyperparams(self):
        with pytest.raises(ValueError):
            SgdState(lr=-1.0, momentum=0.0, velocity=[])
        with pytest.raises(ValueError):
            SgdState(lr=0.1, momentum=1.0, velocity=[])


class TestEma:
    def test_paper_momentum_value(self):
        state = EmaState(decay=0.9997, shadow={"p": np.zeros(1)})
        ema_update(state, {"p": np.ones(1)})
        np.testing.assert_allclose(state.shadow["p"], [0.0003], atol=1e-15)

    def test_fixed_point(self, rng):
        p = rng.normal(size=4)
        state = EmaState.from_params(0.97, {"p": p})
        before = state.shadow["p"].copy()
        ema_update(state, {"p": p})
        np.testing.assert_allclose(state.shadow["p"], before, atol=1e-15)

    def test_closed_form_convergence(self):
        # from 0 toward 1: shadow_k = 1 - decay^k
        decay = 0.9
        state = EmaState(decay=decay, shadow={"p": np.zeros(1)})
        for k in range(1, 21):
            ema_update(state, {"p": np.ones(1)})
            np.testing.assert_allclose(state.shadow["p"], [1 - decay ** k],
                                       atol=1e-12)

    def test_initializes_to_params(self, rng):
        p = rng.normal(size=3)
        state = EmaState.from_params(0.5, {"p": p})
        np.testing.assert_array_equal(state.shadow["p"], p)
        assert state.shadow["p"] is not p

    def test_decay_range(self):
        with pytest.raises(ValueError):
            EmaState(decay=1.0, shadow={})
        with pytest.raises(ValueError):
            EmaState(decay=0.0, shadow={})


class TestCosineLr:
    def test_ramp_endpoints(self):
        assert cosine_lr(0, 100, 10, 0.4) == 0.0
        assert cosine_lr(10, 100, 10, 0.4) == pytest.approx(0.4)

    def test_final_step_zero(self):
        assert cosine_lr(100, 100, 10, 0.4) == pytest.approx(0.0, abs=1e-15)

    def test_decay_midpoint(self):
        assert cosine_lr(55, 100, 10, 0.4) == pytest.approx(0.2)

    def test_no_warmup(self):
        assert cosine_lr(0, 10, 0, 1.0) == pytest.approx(1.0)

    def test_bounds_checked(self):
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, 0, 1.0)
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 0, 1.0)
        with pytest.raises(ValueError):
            cosine_lr(5, 10, 10, 1.0)
