import math

import numpy as np
import pytest

import numerics as nx
from errors import RecordError, ShapeError
from numerics import Adam, Module, Parameter, Tape


# --- HELPERS ---

class TwoLayer(Module):
    def __init__(self, seed=0, precision="float64", extra=False):
        super().__init__("net", seed, precision)
        self.w = self.param("fc.weight", (3, 4))
        self.b = self.param("fc.bias", (3,), init="zeros")
        if extra:
            self.param("extra.weight", (2, 2))
        self.head = self.child(Head(seed, precision))


class Head(Module):
    def __init__(self, seed=0, precision="float64"):
        super().__init__("net.head", seed, precision)
        self.w = self.param("weight", (1, 3))


# --- TEST LAYER PRIMITIVES ---

def test_conv2d_output_size_formula():
    """8x8 input, k=8, stride 4 collapses to a single position."""
    x = np.ones((1, 1, 8, 8))
    out = nx.conv2d(x, np.ones((5, 1, 8, 8)), np.zeros(5), stride=4, padding=0)
    assert out.shape == (1, 5, 1, 1)
    assert nx.conv_output_size(64, 8, 4, 0) == 15


def test_conv2d_identity_kernel():
    """A 1x1 kernel with weight 1 and bias 0 reproduces the input."""
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 7))
    out = nx.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.value, x)


def test_conv2d_is_cross_correlation():
    """No kernel flip: an asymmetric kernel picks the top-left neighbour."""
    x = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 0, 0] = 1.0
    out = nx.conv2d(x, w, np.zeros(1))
    np.testing.assert_array_equal(out.value[0, 0], [[0, 1], [3, 4]])


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        nx.conv2d(np.ones((1, 2, 8, 8)), np.ones((3, 1, 3, 3)), np.zeros(3))


def test_conv2d_rejects_oversized_kernel():
    with pytest.raises(ShapeError, match="height"):
        nx.conv2d(np.ones((1, 1, 4, 8)), np.ones((1, 1, 5, 5)), np.zeros(1))


def test_linear_rejects_inner_dimension():
    with pytest.raises(ShapeError, match="inner dimension"):
        nx.linear(np.ones((2, 3)), np.ones((4, 5)), np.zeros(4))


def test_gru_cell_with_zero_weights_halves_hidden():
    """Zero weights give r = z = 0.5 and n = 0, so h' = h / 2."""
    h = np.random.default_rng(1).standard_normal((3, 4))
    out = nx.gru_cell(np.ones((3, 2)), h, np.zeros((12, 2)), np.zeros((12, 4)), np.zeros(12), np.zeros(12))
    np.testing.assert_allclose(out.value, 0.5 * h, atol=1e-15)


def test_cross_entropy_of_uniform_logits_is_log_n():
    loss = nx.softmax_cross_entropy(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0]))
    assert float(loss.value) == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(ShapeError):
        nx.softmax_cross_entropy(np.zeros((2, 4)), np.array([0, 4]))


def test_elementwise_dispatch_and_unknown_op():
    np.testing.assert_array_equal(nx.elementwise("relu", np.array([-1.0, 2.0])).value, [0.0, 2.0])
    np.testing.assert_array_equal(nx.elementwise("one_hot", np.array([2]), 3), [[0, 0, 1]])
    with pytest.raises(ShapeError, match="unknown"):
        nx.elementwise("softplus", np.ones(2))


def test_sigmoid_is_stable_for_large_inputs():
    out = nx.sigmoid(np.array([-1000.0, 0.0, 1000.0])).value
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


# --- TEST COMPUTATION RECORDS ---

def test_backward_fills_parameter_gradient():
    p = Parameter("w", np.array([1.0, -2.0, 3.0]))
    tape = Tape()
    tape.backward(nx.sum_(nx.square(tape.use(p))))
    np.testing.assert_array_equal(p.grad, 2 * p.value)


def test_shared_parameter_accumulates_gradient():
    """Using one parameter twice in a pass adds both contributions."""
    p = Parameter("w", np.array([1.0, 2.0]))
    x = np.array([3.0, 5.0])
    tape = Tape()
    w = tape.use(p)
    tape.backward(nx.add(nx.sum_(nx.mul(w, x)), nx.sum_(nx.mul(w, x))))
    np.testing.assert_array_equal(p.grad, 2 * x)


def test_backward_twice_is_rejected():
    p = Parameter("w", np.ones(2))
    tape = Tape()
    loss = nx.sum_(tape.use(p))
    tape.backward(loss)
    with pytest.raises(RecordError):
        tape.backward(loss)


def test_backward_needs_scalar_loss():
    p = Parameter("w", np.ones(2))
    tape = Tape()
    with pytest.raises(ShapeError, match="scalar"):
        tape.backward(nx.square(tape.use(p)))


def test_disabled_tape_records_nothing():
    p = Parameter("w", np.ones((2, 2)))
    tape = Tape(enabled=False)
    out = nx.relu(nx.linear(np.ones((1, 2)), tape.use(p), np.zeros(2)))
    assert len(tape) == 0
    assert out.tape is None


def test_operands_from_two_records_are_rejected():
    p = Parameter("w", np.ones(2))
    with pytest.raises(RecordError):
        nx.add(Tape().use(p), Tape().use(p))


# --- TEST GRADIENT CHECKING ---

def test_relative_error_uses_floor_denominator():
    assert float(nx.relative_error(np.array(0.0), np.array(1e-12))) == pytest.approx(1e-4)
    assert float(nx.relative_error(np.array(2.0), np.array(1.0))) == pytest.approx(0.5)


def test_finite_difference_check_accepts_true_gradient():
    x = np.random.default_rng(2).standard_normal(6)
    err = nx.finite_difference_check(lambda v: float(np.sum(v ** 3)), x, 3 * x ** 2)
    assert err <= 1e-6


def test_finite_difference_check_flags_wrong_gradient():
    x = np.linspace(0.5, 1.5, 4)
    assert nx.finite_difference_check(lambda v: float(np.sum(v ** 2)), x, 3 * x) > 0.1


def test_finite_difference_check_restores_input():
    x = np.array([1.0, 2.0])
    before = x.copy()
    nx.finite_difference_check(lambda v: float(v.sum()), x, np.ones(2))
    np.testing.assert_array_equal(x, before)


def test_check_parameters_on_linear_layer():
    rng = np.random.default_rng(3)
    params = {n: Parameter(n, rng.standard_normal(s)) for n, s in (("x", (3, 4)), ("w", (2, 4)), ("b", (2,)))}
    weights = rng.standard_normal((3, 2))

    def loss(t):
        return nx.sum_(nx.mul(nx.tanh(nx.linear(t.use(params["x"]), t.use(params["w"]), t.use(params["b"]))),
                              weights))
    report = nx.check_parameters(loss, params)
    assert set(report) == {"x", "w", "b"}
    assert max(report.values()) <= 1e-6
    assert all(not p.grad.any() for p in params.values())


# --- TEST MODULES AND OPTIMIZER ---

def test_parameter_init_depends_only_on_seed_and_name():
    """Adding a parameter elsewhere never shifts the others' initial values."""
    a, b = TwoLayer(seed=4), TwoLayer(seed=4, extra=True)
    for name, p in a.parameters().items():
        np.testing.assert_array_equal(p.value, b.parameters()[name].value)
    assert not np.array_equal(TwoLayer(seed=5).w.value, a.w.value)


def test_module_collects_child_parameters_by_full_name():
    names = set(TwoLayer().parameters())
    assert names == {"net.fc.weight", "net.fc.bias", "net.head.weight"}
    assert TwoLayer().parameter_count() == 12 + 3 + 3


def test_astype_reaches_children():
    net = TwoLayer(precision="float64").astype("float32")
    assert all(p.value.dtype == np.float32 for p in net.parameters().values())


def test_load_state_dict_reports_mismatched_names():
    net = TwoLayer()
    state = net.state_dict()
    state["net.fc.weight"] = np.zeros((4, 4))
    del state["net.head.weight"]
    with pytest.raises(ShapeError) as exc:
        net.load_state_dict(state)
    assert "net.head.weight" in str(exc.value)
    assert "net.fc.weight" in str(exc.value)


def test_unknown_precision_is_rejected():
    with pytest.raises(ShapeError, match="precision"):
        nx.resolve_dtype("float16")


def test_adam_descends_on_quadratic():
    p = Parameter("w", np.array([0.0]))
    opt = Adam({"w": p}, lr=1e-3, max_grad_norm=None)
    losses = []
    for _ in range(20):
        tape = Tape()
        loss = nx.square(nx.add_scalar(nx.reshape(tape.use(p), ()), -3.0))
        losses.append(float(loss.value))
        tape.backward(loss)
        opt.step()
    assert losses[-1] < losses[0]
    assert not p.grad.any()


def test_adam_clips_global_norm():
    p = Parameter("w", np.zeros(2))
    p.grad[...] = [30.0, 40.0]
    opt = Adam({"w": p}, lr=0.1, max_grad_norm=0.5)
    assert opt.step() == pytest.approx(50.0)
    # first Adam step moves each coordinate by ~lr whatever the scale
    np.testing.assert_allclose(p.value, [-0.1, -0.1], rtol=1e-3)


def test_adam_state_round_trip():
    p = Parameter("w", np.ones(3))
    opt = Adam({"w": p})
    p.grad[...] = 1.0
    opt.step()
    other = Adam({"w": Parameter("w", np.ones(3))})
    other.load_state_dict(opt.state_dict(), opt.t)
    assert other.t == 1
    np.testing.assert_array_equal(other.m["w"], opt.m["w"])
