"""Dense MLP core: forward, manual backprop, Adam, EMA and checkpoints."""

import io
import time

import numpy as np
import pytest

from uotlab.nn import (ACTIVATIONS, AdamState, Mlp, MlpSpec, NonFiniteError, ParamStore,
                       ShapeError, adam_step, ema_update, finite_diff_check, init_params,
                       input_grad_penalty,
                       load_checkpoint, mlp_backward, mlp_forward, save_checkpoint)


def _mse_loss(spec, x, y):
    def loss_fn(p):
        out, cache = mlp_forward(spec, p, x, return_cache=True)
        r = out - y
        g, _ = mlp_backward(spec, p, x, r / len(x), cache)
        return 0.5 * float((r ** 2).sum()) / len(x), g
    return loss_fn


def _well_conditioned(spec, cache, kink=1e-3, saturation=3.0):
    # away from ReLU kinks, and tanh units not so saturated that the true
    # gradient sinks below finite-difference roundoff
    for i, (_, z, _) in enumerate(cache):
        act = spec.layer_activation(i)
        if act in ("relu", "leaky_relu") and np.abs(z).min() < kink:
            return False
        if act == "tanh" and np.abs(z).max() > saturation:
            return False
    return True


def _reference_forward(spec, params, x):
    h = np.array(x, dtype=np.float64)
    for i in range(spec.n_layers):
        rows = []
        for r in h:
            z = [sum(r[k] * params.weights[i][k, j] for k in range(len(r))) + params.biases[i][j]
                 for j in range(params.weights[i].shape[1])]
            act = spec.layer_activation(i)
            if act == "relu":
                z = [max(v, 0.0) for v in z]
            elif act == "leaky_relu":
                z = [v if v > 0 else spec.slope * v for v in z]
            elif act == "tanh":
                z = [np.tanh(v) for v in z]
            rows.append(z)
        h = np.array(rows)
    return h


class TestSpec:
    def test_needs_two_widths(self):
        with pytest.raises(ValueError):
            MlpSpec((3,))

    def test_rejects_zero_width(self):
        with pytest.raises(ValueError):
            MlpSpec((2, 0, 1))

    def test_rejects_unknown_activation(self):
        with pytest.raises(ValueError):
            MlpSpec((2, 2), activation="gelu")


class TestForward:
    def test_identity_net(self):
        spec = MlpSpec((2, 2), output_activation="identity")
        p = ParamStore([np.eye(2)], [np.zeros(2)])
        np.testing.assert_array_equal(mlp_forward(spec, p, [[0.5, -0.5]]), [[0.5, -0.5]])

    def test_zero_weights_give_bias(self):
        spec = MlpSpec((3, 4, 2), activation="identity")
        b = np.array([0.3, -1.2])
        p = ParamStore([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), b])
        x = np.random.default_rng(0).standard_normal((5, 3))
        np.testing.assert_array_equal(mlp_forward(spec, p, x), np.tile(b, (5, 1)))

    @pytest.mark.parametrize("act", ACTIVATIONS)
    def test_matches_straight_line_evaluator(self, act):
        rng = np.random.default_rng(1)
        spec = MlpSpec((2, 8, 1), activation=act)
        p = init_params(spec, rng)
        x = rng.standard_normal((6, 2))
        np.testing.assert_allclose(mlp_forward(spec, p, x), _reference_forward(spec, p, x),
                                   rtol=1e-12, atol=1e-12)

    def test_pure_function(self):
        rng = np.random.default_rng(2)
        spec = MlpSpec((2, 16, 16, 2))
        p = init_params(spec, rng)
        x = rng.standard_normal((32, 2))
        assert mlp_forward(spec, p, x).tobytes() == mlp_forward(spec, p, x).tobytes()

    def test_shape_error_reports_shapes(self):
        spec = MlpSpec((3, 2))
        p = init_params(spec, 0)
        with pytest.raises(ShapeError) as exc:
            mlp_forward(spec, p, np.zeros((4, 2)))
        assert exc.value.actual == (4, 2)


class TestBackward:
    def test_identity_scalar_net(self):
        spec = MlpSpec((1, 1), output_activation="identity")
        p = ParamStore([np.array([[0.7]])], [np.array([0.1])])
        x = np.array([[2.5]])
        g, gx = mlp_backward(spec, p, x, np.ones((1, 1)))
        assert g.weights[0][0, 0] == pytest.approx(2.5)
        assert g.biases[0][0] == pytest.approx(1.0)
        assert gx[0, 0] == pytest.approx(0.7)

    def test_dead_relu_layer(self):
        spec = MlpSpec((2, 3, 1), activation="relu")
        p = ParamStore([np.full((2, 3), -1.0), np.ones((3, 1))], [np.full(3, -1.0), np.zeros(1)])
        x = np.abs(np.random.default_rng(0).standard_normal((4, 2)))
        g, _ = mlp_backward(spec, p, x, np.ones((4, 1)))
        assert not np.any(g.weights[0]) and not np.any(g.biases[0]) and not np.any(g.weights[1])
        assert g.biases[1][0] == 4.0

    def test_random_net_finite_differences(self):
        rng = np.random.default_rng(3)
        spec = MlpSpec((2, 16, 16, 1), activation="tanh")
        p = init_params(spec, rng)
        x, y = rng.standard_normal((8, 2)), rng.standard_normal((8, 1))
        assert finite_diff_check(spec, p, _mse_loss(spec, x, y)) < 1e-4

    def test_upstream_shape_checked(self):
        spec = MlpSpec((2, 3))
        p = init_params(spec, 0)
        with pytest.raises(ShapeError):
            mlp_backward(spec, p, np.zeros((4, 2)), np.zeros((4, 2)))

    def test_input_gradient(self):
        rng = np.random.default_rng(4)
        spec = MlpSpec((3, 8, 2), activation="tanh")
        p = init_params(spec, rng)
        x = rng.standard_normal((1, 3))
        up = rng.standard_normal((1, 2))
        _, gx = mlp_backward(spec, p, x, up)
        h = 1e-6
        num = np.array([((mlp_forward(spec, p, x + h * e) - mlp_forward(spec, p, x - h * e)) * up).sum()
                        / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(gx[0], num, rtol=1e-6, atol=1e-9)


class TestFiniteDiffCheck:
    def test_quadratic_linear_net(self):
        rng = np.random.default_rng(5)
        spec = MlpSpec((3, 2), output_activation="identity")
        p = init_params(spec, rng)
        x, y = rng.standard_normal((10, 3)), rng.standard_normal((10, 2))
        assert finite_diff_check(spec, p, _mse_loss(spec, x, y)) < 1e-8

    def test_deep_relu_away_from_kinks(self):
        rng = np.random.default_rng(6)
        spec = MlpSpec((2, 16, 16, 1), activation="relu")
        while True:
            p = init_params(spec, rng)
            x, y = rng.standard_normal((4, 2)), rng.standard_normal((4, 1))
            _, cache = mlp_forward(spec, p, x, return_cache=True)
            if min(np.abs(z).min() for _, z, _ in cache) > 10 * 1e-4:
                break
        assert finite_diff_check(spec, p, _mse_loss(spec, x, y)) < 1e-4

    def test_three_point_stencil(self):
        rng = np.random.default_rng(8)
        spec = MlpSpec((2, 8, 1), activation="tanh")
        p = init_params(spec, rng)
        x, y = rng.standard_normal((4, 2)), rng.standard_normal((4, 1))
        assert finite_diff_check(spec, p, _mse_loss(spec, x, y), h=1e-5, order=2) < 1e-4

    def test_rejects_unknown_order(self):
        spec = MlpSpec((1, 1))
        with pytest.raises(ValueError):
            finite_diff_check(spec, init_params(spec, 0), _mse_loss(spec, np.ones((1, 1)),
                                                                    np.ones((1, 1))), order=3)

    def test_rejects_nonpositive_step(self):
        spec = MlpSpec((1, 1))
        p = init_params(spec, 0)
        with pytest.raises(ValueError):
            finite_diff_check(spec, p, _mse_loss(spec, np.ones((1, 1)), np.ones((1, 1))), h=0.0)

    def test_sweep_of_random_architectures(self):
        """At least 100 random nets, up to 4 layers and width 64, every activation."""
        rng = np.random.default_rng(20240601)
        t0 = time.perf_counter()
        worst, n, seen = 0.0, 0, set()
        while n < 100:
            n_layers = int(rng.integers(1, 5))
            # log-uniform widths cover 1..64 while keeping the sweep fast
            widths = tuple(int(np.exp(rng.uniform(0.0, np.log(64.99)))) for _ in range(n_layers + 1))
            spec = MlpSpec(widths, ACTIVATIONS[n % 4], ACTIVATIONS[(n // 4) % 4])
            p = init_params(spec, rng)
            x = rng.standard_normal((3, widths[0]))
            y = rng.standard_normal((3, widths[-1]))
            _, cache = mlp_forward(spec, p, x, return_cache=True)
            if not _well_conditioned(spec, cache):
                continue
            worst = max(worst, finite_diff_check(spec, p, _mse_loss(spec, x, y)))
            seen.add(spec.activation)
            n += 1
        assert seen == set(ACTIVATIONS)
        assert worst < 1e-4
        assert time.perf_counter() - t0 < 30.0


class TestInputGradPenalty:
    def test_linear_net_closed_form(self):
        spec = MlpSpec((3, 1))
        w = np.array([[0.5], [-1.0], [2.0]])
        p = ParamStore([w.copy()], [np.array([0.3])])
        val, g = input_grad_penalty(spec, p, np.zeros((4, 3)))
        assert val == pytest.approx(0.5 * (w ** 2).sum())
        np.testing.assert_allclose(g.weights[0], w, rtol=1e-15)
        assert not g.biases[0].any()

    def test_value_matches_numeric_input_gradient(self):
        rng = np.random.default_rng(11)
        spec = MlpSpec((2, 16, 16, 1), activation="leaky_relu")
        p = init_params(spec, rng)
        x = rng.standard_normal((5, 2))
        h = 1e-6
        g = np.array([[(mlp_forward(spec, p, x + h * e)[i, 0] - mlp_forward(spec, p, x - h * e)[i, 0])
                       / (2 * h) for e in np.eye(2)] for i in range(5)])
        val, _ = input_grad_penalty(spec, p, x)
        assert val == pytest.approx(0.5 * (g ** 2).sum() / 5, rel=1e-8)

    def test_parameter_gradient(self):
        rng = np.random.default_rng(12)
        spec = MlpSpec((2, 32, 32, 1), activation="leaky_relu")
        p = init_params(spec, rng)
        x = rng.standard_normal((6, 2))
        assert finite_diff_check(spec, p, lambda q: input_grad_penalty(spec, q, x)) < 1e-6

    def test_rejects_smooth_activations_and_vector_output(self):
        with pytest.raises(ValueError):
            input_grad_penalty(MlpSpec((2, 4, 1), activation="tanh"),
                               init_params(MlpSpec((2, 4, 1), activation="tanh"), 0), np.ones((1, 2)))
        with pytest.raises(ShapeError):
            input_grad_penalty(MlpSpec((2, 2)), init_params(MlpSpec((2, 2)), 0), np.ones((1, 2)))


class TestAdam:
    def test_zero_gradient_is_noop(self):
        spec = MlpSpec((2, 4, 1))
        p = init_params(spec, 0)
        before = p.copy()
        st = AdamState.for_params(p, lr=0.1)
        adam_step(p, p.zeros_like(), st)
        assert st.step == 1
        for a, b in zip(p.arrays(), before.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_first_step_magnitude_is_lr(self):
        p = ParamStore([np.array([[1.0]])], [np.array([0.0])])
        st = AdamState.for_params(p, lr=0.01)
        g = ParamStore([np.array([[3.7]])], [np.array([0.0])])
        adam_step(p, g, st)
        assert 1.0 - p.weights[0][0, 0] == pytest.approx(0.01, rel=1e-6)

    def test_quadratic_descent_monotone(self):
        p = ParamStore([np.array([[1.0]])], [np.array([0.0])])
        st = AdamState.for_params(p, lr=0.05)
        traj = [1.0]
        w, m, v = 1.0, 0.0, 0.0
        for t in range(1, 11):
            adam_step(p, ParamStore([2.0 * p.weights[0]], [np.zeros(1)]), st)
            traj.append(abs(p.weights[0][0, 0]))
            g = 2.0 * w
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.all(np.diff(traj) < 0)
        assert p.weights[0][0, 0] == pytest.approx(w, abs=1e-15)

    def test_nonfinite_gradient_names_layer(self):
        spec = MlpSpec((2, 3, 1))
        p = init_params(spec, 0)
        g = p.zeros_like()
        g.biases[1][0] = np.nan
        with pytest.raises(NonFiniteError, match="b2"):
            adam_step(p, g, AdamState.for_params(p))

    def test_mask_freezes_entries_exactly(self):
        rng = np.random.default_rng(0)
        spec = MlpSpec((2, 3, 1))
        p = init_params(spec, rng)
        before = p.copy()
        mask = p.unflat(rng.uniform(size=p.n_params) < 0.5)
        g = p.unflat(rng.standard_normal(p.n_params))
        adam_step(p, g, AdamState.for_params(p, lr=0.1), mask=mask)
        frozen = mask.flat() == 0
        assert p.flat()[frozen].tobytes() == before.flat()[frozen].tobytes()
        assert np.all(p.flat()[~frozen] != before.flat()[~frozen])


class TestEma:
    def _stores(self, a, b):
        return (ParamStore([np.full((1, 1), a)], [np.full(1, a)]),
                ParamStore([np.full((1, 1), b)], [np.full(1, b)]))

    def test_decay_zero_copies_current(self):
        e, c = self._stores(0.0, 2.0)
        ema_update(e, c, 0.0)
        assert e.weights[0][0, 0] == 2.0

    def test_decay_one_keeps_ema(self):
        e, c = self._stores(0.5, 2.0)
        ema_update(e, c, 1.0)
        assert e.weights[0][0, 0] == 0.5

    def test_half_decay(self):
        e, c = self._stores(0.0, 2.0)
        ema_update(e, c, 0.5)
        assert e.weights[0][0, 0] == 1.0

    def test_decay_out_of_range(self):
        e, c = self._stores(0.0, 2.0)
        with pytest.raises(ValueError):
            ema_update(e, c, 1.5)

    def test_convex_combination(self):
        rng = np.random.default_rng(1)
        spec = MlpSpec((3, 5, 2))
        e, c = init_params(spec, rng), init_params(spec, rng)
        lo = np.minimum(e.flat(), c.flat())
        hi = np.maximum(e.flat(), c.flat())
        ema_update(e, c, float(rng.uniform()))
        assert np.all(e.flat() >= lo) and np.all(e.flat() <= hi)


class TestCheckpoint:
    def test_round_trip_bit_exact(self):
        spec = MlpSpec((2, 7, 3), activation="tanh")
        p = init_params(spec, 9)
        data = save_checkpoint(io.BytesIO(), spec, p, seed=42, step=17, extra={"note": "x"})
        spec2, p2, header = load_checkpoint(data)
        assert spec2 == spec
        assert header["seed"] == 42 and header["step"] == 17 and header["extra"] == {"note": "x"}
        assert p2.flat().tobytes() == p.flat().tobytes()
        assert save_checkpoint(io.BytesIO(), spec2, p2, seed=42, step=17,
                               extra={"note": "x"}) == data

    def test_little_endian_layer_order(self):
        spec = MlpSpec((1, 1, 1))
        p = ParamStore([np.array([[1.0]]), np.array([[3.0]])], [np.array([2.0]), np.array([4.0])])
        data = save_checkpoint(io.BytesIO(), spec, p)
        tail = np.frombuffer(data[-32:], dtype="<f8")
        np.testing.assert_array_equal(tail, [1.0, 2.0, 3.0, 4.0])

    def test_rejects_foreign_bytes(self):
        with pytest.raises(ValueError):
            load_checkpoint(b"not a checkpoint at all")

    def test_mlp_wrapper_checks_shapes(self):
        spec = MlpSpec((2, 3))
        with pytest.raises(ShapeError):
            Mlp(spec, ParamStore([np.zeros((3, 2))], [np.zeros(2)]))
