import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umasplit import autodiff as ad
from umasplit.autodiff import Tensor
from umasplit.nn import FfnSpec, init_ffn
from umasplit.uma import aggregate, dump_rows, find_valleys, predict_weights


def check_invariants(seg, t):
    v = seg.valleys
    assert v[0] == 0 and v[-1] == t
    assert all(a < b for a, b in zip(v, v[1:]))
    assert seg.num_segments == len(v) - 1
    assert 1 <= seg.num_segments <= t
    covered = set()
    for k, (lo, hi) in enumerate(seg.segments):
        assert lo == max(v[k], 1) and hi == v[k + 1]
        covered.update(range(lo, hi + 1))
    assert covered == set(range(1, t + 1))
    for (lo1, hi1), (lo2, hi2) in zip(seg.segments, seg.segments[1:]):
        assert hi1 == lo2  # shared boundary valley frame


def test_valley_example():
    seg = find_valleys([0.9, 0.4, 0.7, 0.3, 0.8])
    assert seg.valleys == (0, 2, 4, 5)
    assert seg.segments == ((1, 2), (2, 4), (4, 5))


def test_monotone_increasing_has_one_segment():
    seg = find_valleys([0.1, 0.2, 0.3])
    assert seg.valleys == (0, 3) and seg.segments == ((1, 3),)


def test_flat_weights_tie_counts_as_valley():
    seg = find_valleys([0.5, 0.5, 0.5])
    assert seg.valleys == (0, 2, 3) and seg.num_segments == 2


def test_single_frame():
    seg = find_valleys([0.7])
    assert seg.valleys == (0, 1) and seg.segments == ((1, 1),)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=60))
def test_segmentation_invariants(alpha):
    seg = find_valleys(alpha)
    check_invariants(seg, len(alpha))
    if len(set(alpha)) == len(alpha):
        # without ties two valleys cannot be adjacent
        assert seg.num_segments <= len(alpha) // 2 + 1


def test_ties_can_exceed_half_bound():
    seg = find_valleys([0.5] * 5)
    assert seg.num_segments == 4 > 5 // 2 + 1


def test_right_boundary_mode_partitions():
    seg = find_valleys([0.9, 0.4, 0.7, 0.3, 0.8], boundary="right")
    assert seg.segments == ((1, 1), (2, 3), (4, 5))


def test_predict_weights_zero_ffn_is_half():
    raw = init_ffn(np.random.default_rng(0), "uma.ffn", FfnSpec(4, 2, 1))
    p = {k: Tensor(np.zeros_like(v)) for k, v in raw.items()}
    for t in (1, 5, 100):
        alpha = predict_weights(Tensor(np.random.default_rng(t).normal(size=(t, 4))), p)
        assert alpha.shape == (t,)
        np.testing.assert_array_equal(alpha.data, 0.5)


def test_predict_weights_gradient():
    rng = np.random.default_rng(1)
    p = {k: Tensor(v) for k, v in init_ffn(rng, "uma.ffn", FfnSpec(4, 2, 1)).items()}
    w = Tensor(rng.normal(size=6))
    f = lambda x: ad.sum_(ad.mul(predict_weights(x, p), w))
    assert ad.finite_difference_check(f, rng.normal(size=(6, 4))) <= 1e-4


def test_aggregate_hand_example():
    e = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
    alpha = Tensor(np.array([0.9, 0.1, 0.9, 0.1]))
    seg = find_valleys(alpha.data)
    assert seg.valleys == (0, 2, 4)
    assert seg.segments == ((1, 2), (2, 4))
    c = aggregate(e, alpha, seg).data[:, 0]
    assert c[0] == pytest.approx((0.9 * 1 + 0.1 * 2) / 1.0, abs=1e-12)
    assert c[1] == pytest.approx((0.1 * 2 + 0.9 * 3 + 0.1 * 4) / 1.1, abs=1e-12)
    assert c[0] == pytest.approx(1.1, abs=1e-12)
    assert c[1] == pytest.approx(3.0, abs=1e-12)


def test_aggregate_single_segment_is_weighted_mean():
    rng = np.random.default_rng(2)
    e = rng.normal(size=(5, 3))
    alpha = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    seg = find_valleys(alpha)
    assert seg.num_segments == 1
    c = aggregate(Tensor(e), Tensor(alpha), seg).data
    np.testing.assert_allclose(c[0], (alpha[:, None] * e).sum(0) / alpha.sum(), atol=1e-12)


def test_aggregate_uniform_alpha_is_arithmetic_mean():
    rng = np.random.default_rng(3)
    e = rng.normal(size=(7, 2))
    seg = find_valleys([0.8, 0.2, 0.9, 0.8, 0.3, 0.6, 0.7])
    c = aggregate(Tensor(e), Tensor(np.full(7, 0.4)), seg).data
    for k, (lo, hi) in enumerate(seg.segments):
        np.testing.assert_allclose(c[k], e[lo - 1:hi].mean(0), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_aggregate_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    t = int(rng.integers(1, 20))
    e, alpha = rng.normal(size=(t, 3)), rng.uniform(0.01, 0.99, size=t)
    seg = find_valleys(alpha)
    c = aggregate(Tensor(e), Tensor(alpha), seg).data
    for k, (lo, hi) in enumerate(seg.segments):
        block = e[lo - 1:hi]
        assert np.all(c[k] >= block.min(0) - 1e-12) and np.all(c[k] <= block.max(0) + 1e-12)


def test_boundary_frame_feeds_both_segments():
    e = np.zeros((5, 1))
    e[1, 0] = 1.0  # frame 2 is the valley
    alpha = np.array([0.9, 0.2, 0.9, 0.8, 0.9])
    seg = find_valleys(alpha)
    assert 2 in seg.valleys
    c = aggregate(Tensor(e), Tensor(alpha), seg).data[:, 0]
    assert c[0] > 0 and c[1] > 0


def test_aggregate_gradient_at_stable_point():
    rng = np.random.default_rng(4)
    p = {k: Tensor(v) for k, v in init_ffn(rng, "uma.ffn", FfnSpec(4, 2, 1)).items()}
    x0 = rng.normal(size=(8, 4))
    seg = find_valleys(predict_weights(Tensor(x0), p).data)
    w = Tensor(rng.normal(size=(seg.num_segments, 4)))
    f = lambda x: ad.sum_(ad.mul(aggregate(x, predict_weights(x, p), seg), w))
    assert ad.finite_difference_check(f, x0) <= 1e-4


def test_dump_rows_format():
    alpha = np.array([0.9, 0.4, 0.7, 0.3, 0.8])
    rows = dump_rows(alpha, find_valleys(alpha))
    assert rows[0] == "frame_index\talpha\tis_valley\tsegment_id"
    assert rows[2] == "2\t0.400000\t1\t1,2"
    assert rows[1].split("\t") == ["1", "0.900000", "0", "1"]
    assert len(rows) == 6
