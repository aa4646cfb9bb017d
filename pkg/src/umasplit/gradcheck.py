"""Finite-difference suites for every differentiable piece of the model.

Each check reduces an op's output to a scalar with a fixed random
projection, so every output coordinate contributes to the gradient.
Errors are ``|analytic - central difference| / max(1, |analytic|)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import OpKind, Tensor, finite_difference_check
from .ctc import ctc_loss, self_condition
from .model import ModelConfig, UmaSplitModel, batch_loss
from .nn import (EncoderBlockConfig, FfnSpec, encoder_block_forward, init_encoder_block, init_ffn,
                 init_layer_norm, init_linear)
from .split import init_split, split_frames
from .uma import aggregate, find_valleys, predict_weights

EPS = 1e-5


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: ad.sum_(ad.mul(y, w))


def _check(op: Callable[[Tensor], Tensor], x: np.ndarray, rng: np.random.Generator) -> float:
    proj = _project(op(Tensor(x)), rng)
    return finite_difference_check(lambda t: proj(op(t)), x, EPS)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """One random instance per primitive: (function of x, x)."""
    r = rng.normal
    m = Tensor(r(size=(4, 2)))
    batch = Tensor(r(size=(2, 3, 4)))
    const = Tensor(r(size=(3, 4)))
    gain, bias = Tensor(r(size=4)), Tensor(r(size=4))
    table_ids = rng.integers(0, 5, size=(2, 3))
    membership = np.array([[1, 1, 0, 0, 0], [0, 1, 1, 1, 0], [0, 0, 0, 1, 1]], dtype=float)
    seg_w = Tensor(rng.uniform(0.1, 0.9, size=5))
    seg_x = Tensor(r(size=(5, 3)))
    mask = rng.random((3, 4)) < 0.3
    return {
        OpKind.MATMUL.value: (lambda x: ad.matmul(x, m), r(size=(3, 4))),
        OpKind.ADD.value: (lambda x: ad.add(batch, x), r(size=4)),
        OpKind.MUL.value: (lambda x: ad.mul(x, const), r(size=(3, 4))),
        OpKind.SCALE.value: (lambda x: ad.scale(x, -1.7), r(size=(3, 4))),
        OpKind.SIGMOID.value: (ad.sigmoid, r(size=(3, 4))),
        OpKind.SWISH.value: (ad.swish, r(size=(3, 4))),
        OpKind.TANH.value: (ad.tanh, r(size=(3, 4))),
        OpKind.EXP.value: (ad.exp, r(size=(3, 4))),
        OpKind.LOG.value: (ad.log, rng.uniform(0.5, 2.0, size=(3, 4))),
        OpKind.SOFTMAX.value: (ad.softmax, r(size=(3, 4))),
        OpKind.LOG_SOFTMAX.value: (ad.log_softmax, r(size=(3, 4))),
        OpKind.LAYER_NORM.value: (lambda x: ad.layer_norm(x, gain, bias), r(size=(3, 4))),
        OpKind.CONCAT.value: (lambda x: ad.concat([x, const, x], axis=0), r(size=(3, 4))),
        OpKind.SLICE.value: (lambda x: ad.slice_(x, (slice(None), slice(1, 4, 2))), r(size=(3, 4))),
        OpKind.TRANSPOSE.value: (lambda x: ad.transpose(x, (2, 0, 1)), r(size=(2, 3, 4))),
        OpKind.EMBEDDING.value: (lambda x: ad.embedding(x, table_ids), r(size=(5, 3))),
        OpKind.SEGMENT_MEAN.value + "[frames]":
            (lambda x: ad.segment_weighted_mean(x, seg_w, membership), r(size=(5, 3))),
        OpKind.SEGMENT_MEAN.value + "[weights]":
            (lambda x: ad.segment_weighted_mean(seg_x, x, membership), rng.uniform(0.1, 0.9, size=5)),
        OpKind.MASKED_FILL.value: (lambda x: ad.masked_fill(x, mask, -3.0), r(size=(3, 4))),
    }


def primitive_suite(trials: int = 100, seed: int = 0) -> dict[str, float]:
    """Max relative FD error per primitive over ``trials`` random instances."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        for name, (op, x) in _op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), _check(op, x, rng))
    return worst


def _leaves(raw: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in raw.items()}


def _stable_valleys(w: np.ndarray, eps: float) -> bool:
    """Valley set cannot flip when every weight moves by up to ``eps``."""
    gaps = np.abs(np.diff(w))
    return bool(gaps.size == 0 or gaps.min() > 4 * eps)


def module_suite(seed: int = 0, trials: int = 5) -> dict[str, float]:
    """FD errors for UMA aggregation, the split module, self-conditioning and CTC."""
    rng = np.random.default_rng(seed)
    worst = {"uma.predict_weights": 0.0, "uma.aggregate": 0.0, "split": 0.0,
             "self_condition": 0.0, "ctc_loss": 0.0, "encoder_block_x2": 0.0}
    d = 8
    for _ in range(trials):
        uma_p = _leaves(init_ffn(rng, "uma.ffn", FfnSpec(d, 2, 1)))
        frames = rng.normal(size=(9, d))
        weights = predict_weights(Tensor(frames), uma_p).data
        if _stable_valleys(weights, 1e-3):
            seg = find_valleys(weights)
            proj = Tensor(rng.normal(size=(seg.num_segments, d)))

            def agg(x):
                return ad.sum_(ad.mul(aggregate(x, predict_weights(x, uma_p), seg), proj))

            worst["uma.aggregate"] = max(worst["uma.aggregate"],
                                         finite_difference_check(agg, frames, EPS))
        worst["uma.predict_weights"] = max(
            worst["uma.predict_weights"], _check(lambda x: predict_weights(x, uma_p), frames, rng))

        split_p = _leaves(init_split(rng, d))
        worst["split"] = max(worst["split"], _check(
            lambda x: split_frames(x, split_p).frames, rng.normal(size=(3, d)), rng))

        sc_p = init_layer_norm("norm", d)
        sc_p.update(init_linear(rng, "ctc_head", d, 5))
        sc_p.update(init_linear(rng, "sc_back", 5, d))
        sc_p = _leaves(sc_p)

        def sc(x):
            out, lp = self_condition(x, sc_p, "norm")
            return ad.concat([out, lp], axis=-1)

        worst["self_condition"] = max(worst["self_condition"], _check(sc, rng.normal(size=(4, d)), rng))

        y = [int(k) for k in rng.integers(1, 4, size=3)]
        worst["ctc_loss"] = max(worst["ctc_loss"], finite_difference_check(
            lambda x: ctc_loss(ad.log_softmax(x), y), rng.normal(size=(7, 4)), EPS))

        blk = EncoderBlockConfig(d, 2, 2 * d)
        enc_p = init_encoder_block(rng, "b1", blk)
        enc_p.update(init_encoder_block(rng, "b2", blk))
        enc_p = _leaves(enc_p)

        def stack(x):
            return encoder_block_forward(encoder_block_forward(x, enc_p, "b1", blk), enc_p, "b2", blk)

        worst["encoder_block_x2"] = max(worst["encoder_block_x2"],
                                        _check(stack, rng.normal(size=(4, d)), rng))
    return worst


def end_to_end_check(model: UmaSplitModel, features: np.ndarray, tokens: list[int],
                     coords: int = 20, seed: int = 0, eps: float = EPS) -> tuple[float, int]:
    """FD check of d(total loss)/d(param) on random parameter coordinates.

    Coordinates whose perturbation changes any segmentation are skipped.
    Returns (max relative error, number of coordinates checked).
    """
    rng = np.random.default_rng(seed)

    def run():
        out = model.forward_batch([features])
        return out, batch_loss(out, [tokens])

    out, loss = run()
    base_valleys = out.segmentations[0].valleys
    grads = ad.backward(loss.total, model.params)
    names = sorted(model.params)
    sizes = np.array([model.params[n].data.size for n in names], dtype=float)
    worst, checked = 0.0, 0
    for _ in range(coords):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        param = model.params[name]
        k = int(rng.integers(param.data.size))
        flat = param.data.reshape(-1)
        orig = flat[k]
        vals = []
        stable = True
        for sign in (1.0, -1.0):
            flat[k] = orig + sign * eps
            o, l = run()
            stable &= o.segmentations[0].valleys == base_valleys
            vals.append(float(l.total.data))
        flat[k] = orig
        if not stable:
            continue
        numeric = (vals[0] - vals[1]) / (2 * eps)
        analytic = float(grads[name].reshape(-1)[k])
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
        checked += 1
    return worst, checked


def default_end_to_end(seed: int = 0) -> tuple[float, int]:
    from .data import SynthConfig, generate_sample

    sample = generate_sample(SynthConfig(feat_dim=8), seed)
    model = UmaSplitModel(ModelConfig(feat_dim=8, seed=seed))
    return end_to_end_check(model, sample.features, sample.tokens, seed=seed)


def run_all(trials: int = 100, seed: int = 0) -> dict[str, float]:
    results = primitive_suite(trials, seed)
    results.update(module_suite(seed))
    results["end_to_end_total_loss"] = default_end_to_end(seed)[0]
    return results


TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


def tolerance_for(name: str) -> float:
    return END_TO_END_TOLERANCE if name.startswith("end_to_end") else TOLERANCE
