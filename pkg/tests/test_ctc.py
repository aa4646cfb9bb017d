import math

import numpy as np
import pytest

from umasplit import autodiff as ad
from umasplit.autodiff import Tensor
from umasplit.ctc import (CTCIncomputable, ctc_loss, ctc_loss_bruteforce, ctc_nll, greedy_decode,
                          required_frames, self_condition)
from umasplit.nn import init_layer_norm, init_linear, layer_norm


def random_case(rng):
    n = int(rng.integers(1, 7))
    v = int(rng.integers(1, 5))
    y = [int(k) for k in rng.integers(1, v + 1, size=int(rng.integers(1, 4)))]
    lp = np.asarray(ad.log_softmax(Tensor(rng.normal(scale=2.0, size=(n, v + 1)))).data)
    return lp, y


def one_hot_path(path, classes, hot=0.0, cold=-50.0):
    lp = np.full((len(path), classes), cold)
    lp[np.arange(len(path)), path] = hot
    return lp


def test_single_frame_single_path():
    lp = np.log([[0.3, 0.7]])
    assert float(ctc_loss(lp, [1]).data) == pytest.approx(-math.log(0.7), abs=1e-12)
    assert float(ctc_loss(lp, [1]).data) == pytest.approx(0.35667, abs=1e-5)


def test_two_frames_uniform():
    lp = np.log(np.full((2, 2), 0.5))
    assert float(ctc_loss(lp, [1]).data) == pytest.approx(-math.log(0.75), abs=1e-12)
    assert ctc_loss_bruteforce(lp, [1]) == pytest.approx(0.28768, abs=1e-5)


def test_target_longer_than_frames():
    with pytest.raises(CTCIncomputable, match="CTC incomputable"):
        ctc_loss(np.log(np.full((1, 3), 1 / 3)), [1, 2])


def test_repeat_needs_blank_frame():
    assert required_frames([1, 1]) == 3
    lp = np.log(np.full((2, 2), 0.5))
    for fn in (ctc_loss, ctc_loss_bruteforce):
        with pytest.raises(CTCIncomputable):
            fn(lp, [1, 1])


def test_bruteforce_guard():
    with pytest.raises(ValueError, match="exceeds"):
        ctc_loss_bruteforce(np.zeros((20, 5)), [1])


def test_concentrated_on_valid_path_is_near_zero():
    lp = ad.log_softmax(Tensor(one_hot_path([1, 0, 2, 2], 3, hot=40.0, cold=0.0))).data
    assert float(ctc_loss(lp, [1, 2]).data) < 1e-12
    assert ctc_loss_bruteforce(lp, [1, 2]) < 1e-12


def test_matches_bruteforce_on_random_instances():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        lp, y = random_case(rng)
        try:
            ref = ctc_loss_bruteforce(lp, y)
        except CTCIncomputable:
            with pytest.raises(CTCIncomputable):
                ctc_loss(lp, y)
            continue
        worst = max(worst, abs(float(ctc_loss(lp, y).data) - ref))
    assert worst <= 1e-9


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 50:
        logits = rng.normal(size=(int(rng.integers(2, 7)), int(rng.integers(2, 5))))
        y = [int(k) for k in rng.integers(1, logits.shape[1], size=int(rng.integers(1, 4)))]
        if logits.shape[0] < required_frames(y):
            continue
        err = ad.finite_difference_check(lambda x: ctc_loss(ad.log_softmax(x), y), logits)
        assert err <= 1e-4
        checked += 1


def test_batched_nll_matches_per_utterance():
    rng = np.random.default_rng(2)
    lps = [ad.log_softmax(Tensor(rng.normal(size=(n, 4)))).data for n in (5, 3, 6)]
    ys = [[1, 2], [3], [2, 2, 1]]
    batch = np.zeros((3, 6, 4))
    for b, lp in enumerate(lps):
        batch[b, :len(lp)] = lp
    per = ctc_nll(Tensor(batch), [5, 3, 6], ys).data
    for b in range(3):
        assert per[b] == pytest.approx(float(ctc_loss(lps[b], ys[b]).data), abs=1e-12)


def test_label_permutation_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        lp, y = random_case(rng)
        c = lp.shape[1]
        if lp.shape[0] < required_frames(y):
            continue
        perm = np.concatenate([[0], 1 + rng.permutation(c - 1)])  # blank stays put
        permuted = np.empty_like(lp)
        permuted[:, perm] = lp
        mapped = [int(perm[k]) for k in y]
        assert float(ctc_loss(permuted, mapped).data) == pytest.approx(float(ctc_loss(lp, y).data),
                                                                       abs=1e-12)


@pytest.mark.parametrize("path, expected", [([1, 1, 0, 2], [1, 2]), ([0, 0, 0], []),
                                            ([1, 0, 1], [1, 1])])
def test_greedy_decode(path, expected):
    assert greedy_decode(one_hot_path(path, 3)) == expected


def test_greedy_decode_properties():
    rng = np.random.default_rng(4)
    for _ in range(100):
        path = rng.integers(0, 4, size=12)
        out = greedy_decode(one_hot_path(path.tolist(), 4))
        assert 0 not in out
        runs = [int(k) for i, k in enumerate(path) if k != 0 and (i == 0 or path[i - 1] != k)]
        assert out == runs


def _sc_params(rng, d=6, c=4, zero_back=False):
    p = init_layer_norm("norm", d)
    p.update(init_linear(rng, "ctc_head", d, c))
    p.update(init_linear(rng, "sc_back", c, d, zero=zero_back))
    return {k: Tensor(v) for k, v in p.items()}


def test_self_condition_zero_back_projection_is_layer_norm():
    rng = np.random.default_rng(5)
    p = _sc_params(rng, zero_back=True)
    h = Tensor(rng.normal(size=(5, 6)))
    out, lp = self_condition(h, p, "norm")
    assert out.shape == (5, 6) and lp.shape == (5, 4)
    np.testing.assert_array_equal(out.data, layer_norm(h, p, "norm").data)
    np.testing.assert_allclose(np.exp(lp.data).sum(-1), 1.0, atol=1e-12)


def test_self_condition_gradient():
    rng = np.random.default_rng(6)
    p = _sc_params(rng)
    w = Tensor(rng.normal(size=(4, 6)))
    f = lambda x: ad.sum_(ad.mul(self_condition(x, p, "norm")[0], w))
    assert ad.finite_difference_check(f, rng.normal(size=(4, 6))) <= 1e-4
