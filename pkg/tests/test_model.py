from fractions import Fraction

import numpy as np
import pytest

from umasplit import autodiff as ad
from umasplit.ctc import CTCIncomputable
from umasplit.data import SynthConfig, generate_sample
from umasplit.io_util import FormatError
from umasplit.model import (ForwardOutput, ModelConfig, UmaSplitModel, batch_loss, checkpoint_paths,
                            combine_losses, default_conditioning_layers, load_checkpoint,
                            save_checkpoint, total_loss)
from umasplit.nn import subsampled_length
from umasplit.train import frame_rates
from umasplit.uma import find_valleys

SMALL = dict(feat_dim=8, model_dim=16, heads=2, ffn_dim=32, vocab_size=6, subsample_channels=4)


@pytest.fixture(scope="module")
def model():
    return UmaSplitModel(ModelConfig(**SMALL))


def test_default_conditioning_layers():
    assert default_conditioning_layers(4) == (2, 3, 4)
    assert ModelConfig().conditioning_layers == (2, 3, 4)


def test_config_rejects_bad_layers():
    with pytest.raises(ValueError):
        ModelConfig(conditioning_layers=(5,))
    with pytest.raises(ValueError):
        ModelConfig(boundary="left")


def test_forward_lengths_with_split(model):
    x = np.random.default_rng(0).normal(size=(100, 8))
    out = model.forward(x)
    i = out.num_segments
    assert 1 <= i <= 24
    assert out.final_logprobs.shape == (2 * i, 7)
    assert out.alpha.shape == (24,)
    names = [name for name, _ in out.intermediate_logprobs]
    assert names == ["high2", "high3", "high4", "low2", "low4"]
    shapes = dict((name, lp.shape[0]) for name, lp in out.intermediate_logprobs)
    assert shapes["high2"] == 24 and shapes["low4"] == 2 * i


def test_forward_lengths_without_split():
    m = UmaSplitModel(ModelConfig(**SMALL, use_split=False))
    out = m.forward(np.random.default_rng(1).normal(size=(60, 8)))
    assert out.final_logprobs.shape[0] == out.num_segments
    assert all(outcome[1] == 0 for outcome in out.slot_outcomes())


def test_logprob_rows_normalised(model):
    out = model.forward(np.random.default_rng(2).normal(size=(40, 8)))
    for lp in [out.final_logprobs] + [lp for _, lp in out.intermediate_logprobs]:
        np.testing.assert_allclose(np.logaddexp.reduce(lp, axis=-1), 0.0, atol=1e-8)


def test_batch_equals_single(model):
    rng = np.random.default_rng(3)
    feats = [rng.normal(size=(n, 8)) for n in (50, 31, 77)]
    batch = model.forward_batch(feats)
    for b, f in enumerate(feats):
        single = model.forward(f)
        np.testing.assert_allclose(batch.sample(b).final_logprobs, single.final_logprobs, atol=1e-10)
        assert batch.segmentations[b] == single.segmentation


def test_segmentation_follows_alpha(model):
    out = model.forward(np.random.default_rng(4).normal(size=(45, 8)))
    assert out.segmentation == find_valleys(out.alpha)


def _fake(l_ctc_len, y_len=2, classes=4):
    lp = np.log(np.full((l_ctc_len, classes), 1 / classes))
    inter = [(f"h{k}", np.log(np.full((6, classes), 1 / classes))) for k in range(5)]
    return ForwardOutput(lp, inter, find_valleys([0.5]), np.array([0.5]), True)


def test_loss_combination_arithmetic():
    assert combine_losses(2.0, [1, 1, 1, 3, 4]) == (2.0, 2.0)
    assert combine_losses(1.5, [1.5] * 5) == (1.5, 1.5)


def test_total_loss_invariant():
    out = _fake(4)
    loss = total_loss(out, [1, 2])
    assert float(loss.total.data) == 0.5 * (float(loss.l_ctc.data) + float(loss.l_inter.data))
    assert set(loss.per_head) == {"final", "h0", "h1", "h2", "h3", "h4"}


def test_incomputable_names_final_head():
    with pytest.raises(CTCIncomputable, match="final") as info:
        total_loss(_fake(1), [1, 2])
    assert info.value.head == "final"


def test_batch_loss_names_failing_head(model):
    x = np.random.default_rng(5).normal(size=(20, 8))
    out = model.forward_batch([x])
    y = [1, 2] * 40
    with pytest.raises(CTCIncomputable) as info:
        batch_loss(out, [y])
    assert info.value.head in {h.name for h in out.heads}


def test_frame_rate_identity_is_exact(model):
    rng = np.random.default_rng(6)
    for n in (30, 64, 101):
        out = model.forward(rng.normal(size=(n, 8)))
        t_sub = subsampled_length(n)
        before, after = frame_rates(t_sub, out.num_segments, Fraction(n, 100))
        assert after == before * Fraction(out.num_segments, t_sub)


def test_checkpoint_round_trip(tmp_path, model):
    save_checkpoint(tmp_path / "ck", model.config, model.state())
    back = load_checkpoint(tmp_path / "ck")
    assert back.config == model.config
    for name, arr in model.state().items():
        assert back.state()[name].tobytes() == arr.tobytes()
    assert not list(tmp_path.glob("*.pending"))


def test_checkpoint_pair_mismatch(tmp_path, model):
    save_checkpoint(tmp_path / "a", model.config, model.state())
    other = UmaSplitModel(ModelConfig(**{**SMALL, "seed": 1}))
    save_checkpoint(tmp_path / "b", other.config, other.state())
    weights_b, _ = checkpoint_paths(tmp_path / "b")
    weights_a, _ = checkpoint_paths(tmp_path / "a")
    weights_a.write_bytes(weights_b.read_bytes())
    with pytest.raises(FormatError, match="mismatch"):
        load_checkpoint(tmp_path / "a")


def test_end_to_end_gradient():
    from umasplit.gradcheck import end_to_end_check

    sample = generate_sample(SynthConfig(feat_dim=8, vocab_size=6, tokens_per_utt=(2, 3)), 0)
    err, checked = end_to_end_check(UmaSplitModel(ModelConfig(**SMALL)), sample.features,
                                    sample.tokens, coords=20)
    assert checked >= 15
    assert err <= 1e-3


def test_frozen_view_builds_no_tape(model):
    out = model.frozen().forward_batch([np.ones((20, 8))])
    assert not out.final.logprobs.requires_grad
    assert model.num_params() == sum(v.size for v in model.state().values())
