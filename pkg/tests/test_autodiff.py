import numpy as np
import pytest

from sd2 import autodiff as ad
from sd2 import rng


def scalar_param(tape, v, name="x"):
    return tape.parameter(np.array([float(v)]), name)


class TestBasics:
    def test_square(self):
        tape = ad.Tape()
        x = scalar_param(tape, 3.0)
        value, grads = tape.gradients(ad.sum_all(ad.mul(x, x)))
        assert value == 9.0
        assert grads["x"][0] == 6.0

    def test_sigmoid_at_zero(self):
        tape = ad.Tape()
        x = scalar_param(tape, 0.0)
        value, grads = tape.gradients(ad.sum_all(ad.sigmoid(x)))
        assert value == 0.5
        assert grads["x"][0] == 0.25

    def test_bernoulli_kl_stationary_at_match(self):
        # KL(sigmoid(w) || 0.5) at w=0: value 0, gradient 0
        from sd2.losses import bernoulli_kl_vec
        tape = ad.Tape()
        w = tape.parameter(np.zeros((1, 1)), "w")
        q = ad.sigmoid(w)
        p = tape.constant(np.full((1, 1), 0.5))
        value, grads = tape.gradients(ad.mean_all(bernoulli_kl_vec(q, p)))
        assert value == pytest.approx(0.0, abs=1e-15)
        assert grads["w"][0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_backward_leaves_forward_values(self):
        tape = ad.Tape()
        x = scalar_param(tape, 2.0)
        y = ad.square(x)
        before = y.value.copy()
        tape.gradients(ad.sum_all(y))
        assert np.array_equal(y.value, before)

    def test_non_scalar_output_rejected(self):
        tape = ad.Tape()
        x = tape.parameter(np.ones(3), "x")
        with pytest.raises(ValueError, match="not scalar"):
            tape.gradients(ad.square(x))

    def test_non_finite_reported_with_node(self):
        tape = ad.Tape()
        x = tape.parameter(np.array([-1.0]), "x")
        with pytest.raises(ad.NonFiniteError, match="log"):
            ad.log(x)

    def test_determinism_bitwise(self):
        def run():
            tape = ad.Tape()
            w = tape.parameter(ad.glorot_init(3, 4, 4), "w")
            h = ad.elu(ad.matmul(tape.constant(np.arange(8.0).reshape(2, 4)), w))
            return tape.gradients(ad.sum_all(h))
        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        assert np.array_equal(g1["w"], g2["w"])


class TestDense:
    def test_identity_map(self):
        tape = ad.Tape()
        w = tape.parameter(np.eye(2), "w")
        b = tape.parameter(np.zeros(2), "b")
        out = ad.dense(tape.constant([[1.0, 2.0]]), w, b, "identity")
        assert np.array_equal(out.value, [[1.0, 2.0]])

    def test_sigmoid_of_zero_weights(self):
        tape = ad.Tape()
        w = tape.parameter(np.zeros((3, 4)), "w")
        b = tape.parameter(np.zeros(4), "b")
        out = ad.dense(tape.constant(np.ones((2, 3))), w, b, "sigmoid")
        assert np.all(out.value == 0.5)

    def test_elu_negative_preactivation(self):
        tape = ad.Tape()
        w = tape.parameter(np.array([[1.0]]), "w")
        b = tape.parameter(np.zeros(1), "b")
        out = ad.dense(tape.constant([[-1.0]]), w, b, "elu")
        assert out.value[0, 0] == pytest.approx(np.exp(-1.0) - 1.0)

    def test_dimension_mismatch(self):
        tape = ad.Tape()
        w = tape.parameter(np.zeros((3, 4)), "w")
        b = tape.parameter(np.zeros(4), "b")
        with pytest.raises(ValueError):
            ad.dense(tape.constant(np.ones((2, 5))), w, b, "elu")


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.ones((2, 2))}
        st = ad.AdamState(p, lr=0.1)
        ad.adam_step(p, {"w": np.zeros((2, 2))}, st)
        assert np.array_equal(p["w"], np.ones((2, 2)))
        assert st.step == 1

    def test_zero_learning_rate(self):
        p = {"w": np.full((2,), 5.0)}
        st = ad.AdamState(p, lr=0.0)
        ad.adam_step(p, {"w": np.ones(2)}, st)
        assert np.array_equal(p["w"], np.full((2,), 5.0))

    def test_first_step_is_signed_learning_rate(self):
        # bias correction makes |step| ~= lr for any nonzero gradient when eps ~ 0
        p = {"w": np.array([1.0])}
        st = ad.AdamState(p, lr=0.01, eps=1e-16)
        ad.adam_step(p, {"w": np.array([-3.7])}, st)
        assert p["w"][0] == pytest.approx(1.0 + 0.01, abs=1e-9)

    def test_shape_mismatch(self):
        p = {"w": np.ones(3)}
        st = ad.AdamState(p)
        with pytest.raises(ValueError):
            ad.adam_step(p, {"w": np.ones(4)}, st)

    def test_negative_lr_rejected(self):
        with pytest.raises(ValueError):
            ad.AdamState({"w": np.ones(1)}, lr=-1.0)


def two_layer_params(seed=0):
    return {
        "w1": ad.glorot_init(rng.mix_key(seed, "w1"), 4, 8),
        "b1": np.zeros(8),
        "w2": ad.glorot_init(rng.mix_key(seed, "w2"), 8, 1),
        "b2": np.zeros(1),
    }


X10 = rng.normal_matrix(101, 10, 4)
Y10 = rng.bernoulli(102, np.full(10, 0.5)).reshape(-1, 1)


def net_ce_loss(tape, params):
    p = {k: tape.parameter(v, k) for k, v in params.items()}
    h = ad.dense(tape.constant(X10), p["w1"], p["b1"], "elu")
    q = ad.clip(ad.dense(h, p["w2"], p["b2"], "sigmoid"), 1e-7, 1 - 1e-7)
    ce = ad.neg(ad.add(ad.scale(ad.log(q), Y10),
                       ad.scale(ad.log(ad.shift(ad.neg(q), 1.0)), 1.0 - Y10)))
    return ad.mean_all(ce)


class TestFiniteDiff:
    def test_linear_loss_exact(self):
        def loss(tape, params):
            x = tape.parameter(params["x"], "x")
            return ad.sum_all(ad.scale(x, 3.0))
        err = ad.finite_diff_check(loss, {"x": np.arange(4.0)})
        assert err < 1e-10

    def test_two_layer_network(self):
        err = ad.finite_diff_check(net_ce_loss, two_layer_params())
        assert err < 1e-4

    def test_injected_fault_detected(self):
        def loss(tape, params):
            x = tape.parameter(params["x"], "x")
            doubled = ad.Tensor(tape, x.value.copy(), (x,), (lambda g: 2.0 * g,), "bad")
            return ad.sum_all(doubled)
        err = ad.finite_diff_check(loss, {"x": np.arange(1.0, 4.0)})
        assert err == pytest.approx(0.5, abs=1e-6)

    def test_detached_values_replayed(self):
        # teacher held at base value: the stop-gradient objective's gradient
        def loss(tape, params):
            x = tape.parameter(params["x"], "x")
            s = ad.sigmoid(x)
            teacher = ad.detach(s)
            return ad.mean_all(ad.square(ad.sub(s, ad.scale(teacher, 0.5))))
        err = ad.finite_diff_check(loss, {"x": np.array([0.3, -0.7])})
        assert err < 1e-7

    def test_eps_validated(self):
        with pytest.raises(ValueError):
            ad.finite_diff_check(lambda t, p: None, {}, eps=0.1)


class TestCompositeOps:
    @pytest.mark.parametrize("builder", [
        lambda t, x: ad.mean_all(ad.exp(ad.scale(x, 0.3))),
        lambda t, x: ad.sum_all(ad.square(ad.elu(x))),
        lambda t, x: ad.sum_all(ad.mean_rows(ad.mul(x, x))),
        lambda t, x: ad.sum_all(ad.select_cols(ad.concat_cols([x, ad.neg(x)]), 2)),
        lambda t, x: ad.sum_all(ad.select_rows(ad.sigmoid(x), np.array([0, 2, 2]))),
        lambda t, x: ad.sum_all(ad.clip(x, -0.4, 0.4)),
    ])
    def test_gradcheck(self, builder):
        def loss(tape, params):
            x = tape.parameter(params["x"], "x")
            return builder(tape, x)
        x = rng.normal_matrix(55, 3, 2)
        assert ad.finite_diff_check(loss, {"x": x}) < 1e-6

    def test_mmd_rbf_gradcheck(self):
        def loss(tape, params):
            a = tape.parameter(params["a"], "a")
            b = tape.parameter(params["b"], "b")
            return ad.mmd_rbf(a, b, bandwidth=1.3)
        a = rng.normal_matrix(66, 5, 3)
        b = rng.normal_matrix(67, 4, 3) + 0.4
        assert ad.finite_diff_check(loss, {"a": a, "b": b}) < 1e-6

    def test_mmd_rbf_identical_groups_zero(self):
        tape = ad.Tape()
        a = tape.parameter(rng.normal_matrix(68, 4, 2), "a")
        out = ad.mmd_rbf(a, tape.constant(a.value.copy()), bandwidth=1.0)
        assert out.value == pytest.approx(0.0, abs=1e-12)


def test_glorot_bounds():
    w = ad.glorot_init(1, 30, 40)
    limit = np.sqrt(6.0 / 70.0)
    assert np.all(np.abs(w) <= limit)
