import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nsgrid import numerics as nx

finite = st.floats(-20, 20, allow_nan=False)


def test_softmax_symmetric_inputs():
    assert np.allclose(nx.softmax(nx.tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(nx.softmax(nx.tensor([1.0, 1.0, 1.0])).data, [1 / 3] * 3)


@given(arrays(np.float64, (4, 7), elements=finite))
def test_softmax_rows_on_simplex(x):
    p = nx.softmax(nx.tensor(x), axis=1).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_layer_norm_of_constant_is_zero():
    assert np.abs(nx.layer_norm(nx.tensor(np.full(6, 3.7))).data).max() < 1e-12


def test_stop_gradient_product_rule():
    x = nx.param(np.array(3.0))
    (g,) = nx.backward(x * nx.stop_gradient(x), [x])
    assert g == pytest.approx(3.0)
    (g,) = nx.backward(nx.stop_gradient(x) * 1.0, [x])
    assert g == 0.0


def test_stop_gradient_forward_identity(rng):
    x = nx.param(rng.standard_normal((3, 4)))
    assert np.array_equal(nx.stop_gradient(x).data, x.data)
    a = nx.gelu(x @ nx.tensor(np.eye(4)))
    b = nx.gelu(nx.stop_gradient(x) @ nx.tensor(np.eye(4)))
    assert np.array_equal(a.data, b.data)


def test_grad_check_quadratic():
    assert nx.grad_check(lambda x: (x * x).sum(), np.array([2.0]), 1e-5) <= 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_nonfinite():
    with pytest.raises(ValueError, match="coordinate"):
        nx.grad_check(lambda x: x.log().sum(), np.array([1.0, 0.0]), 1e-5)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.tensor(np.zeros((2, 3))) @ nx.tensor(np.zeros((4, 5)))


def test_unreached_leaf_gets_zero_gradient():
    a, b = nx.param(np.ones(3)), nx.param(np.ones(3))
    ga, gb = nx.backward((a * 2.0).sum(), [a, b])
    assert np.array_equal(gb, np.zeros(3)) and np.array_equal(ga, np.full(3, 2.0))


def test_shared_node_visited_once():
    x = nx.param(np.array([1.5]))
    y = x * x
    (g,) = nx.backward((y + y).sum(), [x])
    assert g[0] == pytest.approx(6.0)


OPS = {
    "softmax": lambda x: (nx.softmax(x, axis=-1) * np.arange(5.0)).sum(),
    "log_softmax": lambda x: (nx.log_softmax(x, axis=0) * np.linspace(-1, 1, 3)[:, None]).sum(),
    "layer_norm": lambda x: (nx.layer_norm(x) * np.arange(5.0)).sum(),
    "gelu": lambda x: nx.gelu(x).sum(),
    "sigmoid_tanh": lambda x: (nx.sigmoid(x) * x.tanh()).sum(),
    "logsumexp": lambda x: nx.logsumexp(x, axis=-1).sum(),
    "matmul": lambda x: ((x @ x.transpose(1, 0)) ** 2).mean(),
    "concat_stack": lambda x: (nx.concat([x, x * 2.0], axis=0) * nx.stack([x, x], axis=0).reshape(6, 5)).sum(),
    "attention": lambda x: nx.attention(x.reshape(1, 3, 5), x.reshape(1, 3, 5) * 0.5,
                                        x.reshape(1, 3, 5), nx.causal_mask(3)).sum(),
    "where_index": lambda x: nx.where(np.eye(3, 5, dtype=bool), x, 0.0)[[0, 2], 1:4].sum(),
    "exp_log_sqrt": lambda x: ((x * x + 1.0).sqrt().log() + (x * 0.1).exp()).sum(),
    "clamp_div": lambda x: (x.clamp(-0.5, 0.5) / (x * x + 2.0)).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name, rng):
    for _ in range(5):
        x = rng.standard_normal((3, 5))
        assert nx.grad_check(OPS[name], x) <= 1e-4, name


def test_no_grad_records_nothing():
    x = nx.param(np.ones(2))
    with nx.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert nx.grad_enabled()


@pytest.mark.parametrize("opt", ["adam", "sgd"])
def test_optimizers_descend_a_quadratic(opt):
    p = {"w": nx.param(np.array([3.0, -2.0]))}
    o = nx.Adam(p, lr=0.1) if opt == "adam" else nx.SGD(p, lr=0.1)
    for _ in range(200):
        loss = (p["w"] * p["w"]).sum()
        o.step(dict(zip(["w"], nx.backward(loss, [p["w"]]))))
    assert np.abs(p["w"].data).max() < 0.05


def test_ascent_flag_reverses_direction():
    p = {"w": nx.param(np.array([1.0]))}
    nx.SGD(p, lr=0.1, clip_norm=None).step({"w": np.array([1.0])}, ascent=True)
    assert p["w"].data[0] == pytest.approx(1.1)


def test_clip_grad_norm_returns_preclip_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert nx.clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert np.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
