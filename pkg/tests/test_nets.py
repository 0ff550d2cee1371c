import numpy as np
import pytest

from flowrl import nets
from flowrl.nets import (ConfigError, LayoutBuilder, MlpSpec, ParamVector,
                         init_mlp_params, mlp, mlp_forward)
from flowrl.tape import Tensor, finite_diff_check, no_grad


def pack_2_2_1():
    """Hand-fixed 2-2-1 net: W1=[[1,0.5],[-1,0.25]], b1=[0.1,-0.2], W2=[[2],[3]], b2=[0.5]."""
    spec = MlpSpec((2, 2, 1), ("tanh", "identity"))
    params = np.array([1.0, 0.5, -1.0, 0.25,   # W1 row-major (in,out)
                       0.1, -0.2,              # b1
                       2.0, 3.0,               # W2
                       0.5])                   # b2
    return spec, params


def test_identity_weights_identity_activation():
    spec = MlpSpec((2, 2), ("identity",))
    params = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])  # I, zero bias
    out = mlp_forward(spec, params, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(out, [1.0, 2.0])


def test_zero_params_tanh_gives_zero():
    spec = mlp((3, 4, 2))
    out = mlp_forward(spec, np.zeros(spec.param_count), np.array([0.3, -1.0, 2.0]))
    np.testing.assert_array_equal(out, np.zeros(2))


def test_2_2_1_matches_hand_evaluation():
    # independent hand evaluation of the affine+tanh chain on input [1, 0]
    spec, params = pack_2_2_1()
    x = np.array([1.0, 0.0])
    h1 = np.tanh(np.array([1.0 * 1.0 + 0.1, 0.5 * 1.0 - 0.2]))
    expected = 2.0 * h1[0] + 3.0 * h1[1] + 0.5
    out = mlp_forward(spec, params, x)
    np.testing.assert_allclose(out, [expected], rtol=1e-15)


def test_forward_is_pure():
    spec, params = pack_2_2_1()
    x = np.array([0.7, -0.3])
    a = mlp_forward(spec, params, x)
    b = mlp_forward(spec, params, x)
    assert np.array_equal(a, b)


def test_dimension_mismatch_raises():
    spec, params = pack_2_2_1()
    with pytest.raises(ConfigError):
        mlp_forward(spec, params, np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ConfigError):
        mlp_forward(spec, params[:-1], np.array([1.0, 2.0]))


def test_batched_forward_matches_rowwise():
    spec, params = pack_2_2_1()
    xs = np.random.default_rng(0).standard_normal((5, 2))
    batched = mlp_forward(spec, params, xs)
    rows = np.stack([mlp_forward(spec, params, x) for x in xs])
    np.testing.assert_allclose(batched, rows, atol=1e-14)


def test_mlp_grad_matches_finite_diff():
    spec, params = pack_2_2_1()
    x = np.array([0.4, -1.2])

    def loss(p):
        y = mlp_forward(spec, p, x)
        return (y * y).sum()

    assert finite_diff_check(loss, params) < 1e-4


def test_param_vector_invariants():
    with pytest.raises(ConfigError):
        ParamVector(np.array([1.0, np.inf]), {"a": (0, 2)})
    with pytest.raises(ConfigError):
        ParamVector(np.zeros(3), {"a": (0, 2)})  # does not cover
    with pytest.raises(ConfigError):
        ParamVector(np.zeros(3), {"a": (0, 2), "b": (1, 2)})  # overlap
    pv = ParamVector(np.arange(4, dtype=np.float64), {"a": (0, 1), "b": (1, 3)})
    np.testing.assert_array_equal(pv.slice_of("b"), [1.0, 2.0, 3.0])
    with no_grad():
        t = Tensor(pv.values)
    np.testing.assert_array_equal(pv.slice_of("a", t).data, [0.0])


def test_layout_builder():
    b = LayoutBuilder()
    b.add("x", 3)
    b.add("y", 2)
    with pytest.raises(ConfigError):
        b.add("x", 1)
    pv = b.finalize()
    assert pv.values.size == 5
    assert pv.layout == {"x": (0, 3), "y": (3, 2)}


def test_init_zero_output_layer_gives_zero_forward():
    spec = mlp((3, 5, 2))
    rng = np.random.default_rng(7)
    params = init_mlp_params(spec, rng, zero_output=True)
    out = mlp_forward(spec, params, np.array([1.0, -2.0, 0.5]))
    np.testing.assert_array_equal(out, np.zeros(2))
