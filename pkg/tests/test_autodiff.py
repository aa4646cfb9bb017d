import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from umasplit import autodiff as ad
from umasplit.autodiff import OpKind, Tensor
from umasplit.gradcheck import primitive_suite


def leaf(x, name="x"):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True, name=name)


def test_sigmoid_derivative_at_zero():
    x = leaf(0.0)
    g = ad.backward(ad.sigmoid(x))
    assert g["x"] == pytest.approx(0.25, abs=1e-15)


def test_identity_matmul_gradient_is_ones():
    x = leaf(np.random.default_rng(0).normal(size=(3, 3)))
    g = ad.backward(ad.sum_(ad.matmul(Tensor(np.eye(3)), x)))
    np.testing.assert_array_equal(g["x"], np.ones((3, 3)))


def test_layer_norm_matches_finite_differences():
    rng = np.random.default_rng(1)
    gain, bias = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    w = Tensor(rng.normal(size=4))
    f = lambda x: ad.sum_(ad.mul(ad.layer_norm(x, gain, bias), w))
    assert ad.finite_difference_check(f, rng.normal(size=4), 1e-5) <= 1e-6


def test_fd_check_square():
    assert ad.finite_difference_check(lambda x: ad.mul(x, x), np.array(3.0), 1e-5) <= 1e-9


def test_fd_check_swish_at_one():
    assert ad.finite_difference_check(ad.swish, np.array(1.0), 1e-5) <= 1e-6


def test_softmax_first_component():
    x = leaf([0.0, 0.0])
    g = ad.backward(ad.slice_(ad.softmax(x), 0))
    np.testing.assert_allclose(g["x"], [0.25, -0.25], atol=1e-15)
    f = lambda t: ad.slice_(ad.softmax(t), 0)
    assert ad.finite_difference_check(f, np.zeros(2), 1e-5) <= 1e-6


def test_fd_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        ad.finite_difference_check(ad.exp, np.array(1.0), 0.1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_check_reports_nan_coordinate():
    with pytest.raises(FloatingPointError, match="coordinate 1"):
        ad.finite_difference_check(lambda x: ad.sum_(ad.log(x)), np.array([1.0, 5e-6]), 1e-5)


def test_backward_requires_scalar():
    with pytest.raises(ad.ShapeError, match="backward requires scalar"):
        ad.backward(ad.exp(leaf([1.0, 2.0])))


def test_detached_leaf_gets_zero_gradient():
    used, unused = leaf(2.0, "a"), leaf([1.0, 2.0], "b")
    g = ad.backward(ad.mul(used, used), {"a": used, "b": unused})
    assert g["a"] == pytest.approx(4.0)
    np.testing.assert_array_equal(g["b"], [0.0, 0.0])


def test_fanout_accumulates():
    x = leaf(1.5)
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))
    assert ad.backward(y)["x"] == pytest.approx(2 * 1.5 + 3)


def test_shape_mismatch_is_an_error():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_leading_batch_broadcast_gradient():
    b = leaf(np.zeros(4), "b")
    out = ad.add(Tensor(np.ones((2, 3, 4))), b)
    np.testing.assert_array_equal(ad.backward(ad.sum_(out))["b"], np.full(4, 6.0))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    ls = ad.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(ls, np.log(p), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-10, 10)), st.integers(1, 5))
def test_uniform_segment_mean_is_arithmetic_mean(frames, cut):
    m = np.zeros((2, 6))
    m[0, :cut + 1] = 1
    m[1, cut:] = 1
    out = ad.segment_weighted_mean(Tensor(frames), Tensor(np.full(6, 0.37)), m).data
    np.testing.assert_allclose(out[0], frames[:cut + 1].mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(out[1], frames[cut:].mean(axis=0), atol=1e-12)


def test_segment_mean_degenerate_weight():
    with pytest.raises(FloatingPointError, match="degenerate segment weight"):
        ad.segment_weighted_mean(Tensor(np.ones((2, 1))), Tensor(np.zeros(2)), np.ones((1, 2)))


def test_every_opkind_passes_random_gradient_checks():
    worst = primitive_suite(trials=100, seed=3)
    covered = {name.split("[")[0] for name in worst}
    assert covered == {op.value for op in OpKind}
    for name, err in worst.items():
        assert err <= 1e-4, name


def test_params_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.weight": rng.normal(size=(3, 2)), "scalar": np.array(1.5), "é": rng.normal(size=4)}
    path = tmp_path / "p.umaw"
    ad.save_params(path, params)
    blob = path.read_bytes()
    assert blob[:4] == b"UMAW"
    assert int.from_bytes(blob[4:8], "little") == ad.PARAM_VERSION
    back = ad.read_params(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()


def test_params_rejects_corruption():
    blob = ad.dump_params({"w": np.ones((2, 2))})
    with pytest.raises(ad.FormatError, match="magic"):
        ad.load_params(b"XXXX" + blob[4:])
    with pytest.raises(ad.FormatError, match="offset"):
        ad.load_params(blob[:-3])
