import numpy as np
import pytest

from ocnet.optim import AdamConfig, AdamState, NumericalError, adam_step
from ocnet.tensor import Tensor


def params_of(**kwargs):
    return {name: Tensor(np.asarray(v, dtype=np.float32)) for name, v in kwargs.items()}


class TestAdamStep:
    def test_zero_gradient_leaves_params(self):
        params = params_of(w=[1.0, -2.0, 3.0])
        state = AdamState(params)
        out = adam_step(state, params, {"w": np.zeros(3, dtype=np.float32)})
        assert np.array_equal(out["w"].data, params["w"].data)
        assert state.t == 1

    def test_first_step_hand_value(self):
        # g=1, lr=1e-4: bias correction makes m_hat=v_hat=1, so the update
        # is -lr/(1+eps) ~ -1e-4.  Checked in f64 where rounding is far
        # below the comparison tolerance.
        params = {"w": Tensor(np.zeros(1, dtype=np.float64))}
        state = AdamState(params, AdamConfig(lr=1e-4))
        out = adam_step(state, params, {"w": np.ones(1, dtype=np.float64)})
        expected = -1e-4 / (1.0 + 1e-8)
        assert abs(float(out["w"].data[0]) - expected) < 1e-12

    def test_identical_histories_identical_updates(self):
        rng = np.random.default_rng(0)
        g_seq = [rng.normal(size=4).astype(np.float32) for _ in range(5)]
        params = params_of(a=np.ones(4), b=np.ones(4))
        state = AdamState(params)
        for g in g_seq:
            params = adam_step(state, params, {"a": g, "b": g})
        assert np.array_equal(params["a"].data, params["b"].data)

    def test_frozen_param_bitwise_unchanged(self):
        params = params_of(conv=[1.5, 2.5], fc=[1.5, 2.5])
        state = AdamState(params)
        g = np.full(2, 0.3, dtype=np.float32)
        for _ in range(10):
            params = adam_step(state, params, {"conv": g, "fc": g}, frozen=frozenset({"conv"}))
        assert params["conv"].data.tolist() == [1.5, 2.5]
        assert not np.array_equal(params["fc"].data, params["conv"].data)

    def test_missing_grad_is_skipped(self):
        params = params_of(used=[1.0], unused=[1.0])
        state = AdamState(params)
        params = adam_step(state, params, {"used": np.ones(1, dtype=np.float32)})
        assert params["unused"].data.tolist() == [1.0]

    def test_non_finite_gradient_names_param(self):
        params = params_of(w=[1.0], bad=[1.0])
        state = AdamState(params)
        g = {"w": np.ones(1, np.float32), "bad": np.array([np.nan], np.float32)}
        with pytest.raises(NumericalError, match="bad"):
            adam_step(state, params, g)
        # aborted before mutating anything
        assert state.t == 0

    def test_determinism(self):
        def run():
            params = params_of(w=np.linspace(-1, 1, 8))
            state = AdamState(params, AdamConfig(lr=1e-3))
            rng = np.random.default_rng(4)
            for _ in range(20):
                params = adam_step(state, params, {"w": rng.normal(size=8).astype(np.float32)})
            return params["w"].data

        assert np.array_equal(run(), run())

    def test_update_magnitude_bound(self):
        # |delta| <= 10*lr elementwise on random bounded gradients.
        lr = 1e-3
        params = params_of(w=np.zeros(16))
        state = AdamState(params, AdamConfig(lr=lr))
        rng = np.random.default_rng(9)
        for _ in range(50):
            before = params["w"].data.copy()
            g = rng.uniform(-5, 5, size=16).astype(np.float32)
            params = adam_step(state, params, {"w": g})
            assert np.all(np.abs(params["w"].data - before) <= 10 * lr)

    def test_second_moment_nonnegative(self):
        params = params_of(w=np.zeros(4))
        state = AdamState(params)
        rng = np.random.default_rng(2)
        for _ in range(10):
            params = adam_step(state, params, {"w": rng.normal(size=4).astype(np.float32)})
        assert np.all(state.v["w"] >= 0)

    def test_t_strictly_increases(self):
        params = params_of(w=[0.0])
        state = AdamState(params)
        for expected in range(1, 6):
            params = adam_step(state, params, {"w": np.zeros(1, np.float32)})
            assert state.t == expected

    def test_shape_mismatch_rejected(self):
        params = params_of(w=[1.0, 2.0])
        state = AdamState(params)
        with pytest.raises(ValueError, match="shape"):
            adam_step(state, params, {"w": np.zeros(3, np.float32)})
