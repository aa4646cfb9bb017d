"""The assembled UMA-Split network and its training objective.

Pipeline: conv subsampling -> high-rate encoder (self-conditioned CTC at the
conditioning layers) -> UMA weights, valleys, aggregation -> low-rate
encoder (intermediate CTC through the split module) -> split -> CTC head.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import config as cfgfile
from .autodiff import Tensor
from .ctc import CTCIncomputable, ctc_head, ctc_nll, required_frames, self_condition
from .io_util import atomic_write_bytes
from .nn import (EncoderBlockConfig, FfnSpec, UtteranceTooShort, add_positions, conv_subsample,
                 encoder_block_forward, init_conv_subsample, init_encoder_block, init_ffn,
                 init_layer_norm, init_linear, layer_norm, subsampled_length)
from .split import init_split, split_frames
from .uma import BOUNDARY_MODES, UmaSegmentation, aggregate, find_valleys, predict_weights

UMA_EXPANSION = 2


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 8
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    high_rate_layers: int = 4
    low_rate_layers: int = 6
    vocab_size: int = 30
    conditioning_layers: tuple[int, ...] | None = None
    low_rate_inter_layers: tuple[int, ...] = (2, 4)
    use_split: bool = True
    use_self_conditioning: bool = True
    boundary: str = "shared"
    dropout: float = 0.0
    subsample_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.conditioning_layers is None:
            object.__setattr__(self, "conditioning_layers",
                               default_conditioning_layers(self.high_rate_layers))
        object.__setattr__(self, "conditioning_layers", tuple(self.conditioning_layers))
        object.__setattr__(self, "low_rate_inter_layers", tuple(self.low_rate_inter_layers))
        if not all(1 <= k <= self.high_rate_layers for k in self.conditioning_layers):
            raise ValueError("conditioning_layers must lie in [1, high_rate_layers]")
        if not all(1 <= k <= self.low_rate_layers for k in self.low_rate_inter_layers):
            raise ValueError("low_rate_inter_layers must lie in [1, low_rate_layers]")
        if self.boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}")
        if self.ffn_dim % self.model_dim:
            raise ValueError("ffn_dim must be a multiple of model_dim")
        EncoderBlockConfig(self.model_dim, self.heads, self.ffn_dim, self.dropout)

    @property
    def num_classes(self) -> int:
        return self.vocab_size + 1

    @property
    def block(self) -> EncoderBlockConfig:
        return EncoderBlockConfig(self.model_dim, self.heads, self.ffn_dim, self.dropout)

    @property
    def high_rate_output_norm(self) -> bool:
        # the conditioned output of the last layer is already normalised
        return not (self.use_self_conditioning and self.high_rate_layers in self.conditioning_layers)


def default_conditioning_layers(layers: int) -> tuple[int, ...]:
    picks = [int(layers / 2 + 0.5), int(3 * layers / 4 + 0.5), layers]
    return tuple(sorted({max(1, k) for k in picks}))


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d = config.model_dim
    p: dict[str, np.ndarray] = {}
    p.update(init_conv_subsample(rng, "subsample", config.feat_dim, config.subsample_channels, d))
    for layer in range(1, config.high_rate_layers + 1):
        p.update(init_encoder_block(rng, f"high.{layer}", config.block))
    for layer in config.conditioning_layers:
        p.update(init_layer_norm(f"high.sc{layer}.norm", d))
    if config.high_rate_output_norm:
        p.update(init_layer_norm("high.norm_out", d))
    p.update(init_ffn(rng, "uma.ffn", FfnSpec(d, UMA_EXPANSION, 1)))
    for layer in range(1, config.low_rate_layers + 1):
        p.update(init_encoder_block(rng, f"low.{layer}", config.block))
    p.update(init_split(rng, d))
    p.update(init_linear(rng, "ctc_head", d, config.num_classes))
    if config.use_self_conditioning:
        p.update(init_linear(rng, "sc_back", config.num_classes, d))
    return p


@dataclass
class HeadOutput:
    name: str
    logprobs: Tensor  # (B, N, C), zero beyond lengths
    lengths: np.ndarray


@dataclass
class BatchOutput:
    final: HeadOutput
    intermediates: list[HeadOutput]
    alpha: Tensor  # (B, T')
    subsampled_lengths: np.ndarray
    segmentations: list[UmaSegmentation]
    use_split: bool

    @property
    def heads(self) -> list[HeadOutput]:
        return [self.final, *self.intermediates]

    def sample(self, b: int) -> "ForwardOutput":
        def cut(h: HeadOutput) -> np.ndarray:
            return h.logprobs.data[b, :h.lengths[b]]

        return ForwardOutput(
            final_logprobs=cut(self.final),
            intermediate_logprobs=[(h.name, cut(h)) for h in self.intermediates],
            segmentation=self.segmentations[b],
            alpha=self.alpha.data[b, :self.subsampled_lengths[b]],
            use_split=self.use_split,
        )


@dataclass
class ForwardOutput:
    final_logprobs: np.ndarray
    intermediate_logprobs: list[tuple[str, np.ndarray]]
    segmentation: UmaSegmentation
    alpha: np.ndarray
    use_split: bool

    @property
    def num_segments(self) -> int:
        return self.segmentation.num_segments

    def slot_outcomes(self) -> list[tuple[int, int]]:
        """Greedy argmax per slot for each aggregated frame."""
        best = np.argmax(self.final_logprobs, axis=-1)
        if self.use_split:
            return [(int(a), int(b)) for a, b in best.reshape(-1, 2)]
        return [(int(a), 0) for a in best]


@dataclass
class LossBreakdown:
    l_ctc: Tensor
    l_inter: Tensor
    total: Tensor
    per_head: dict[str, float] = field(default_factory=dict)


class UmaSplitModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        raw = init_params(config) if params is None else params
        expected = init_params(config) if params is not None else raw
        if params is not None:
            missing = set(expected) ^ set(params)
            if missing:
                raise ValueError(f"parameter names do not match config: {sorted(missing)[:5]}")
            for name, arr in params.items():
                if np.shape(arr) != expected[name].shape:
                    raise ValueError(f"shape mismatch for {name}")
        self.params = ad.parameters(raw.items())

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            self.params[name].data = np.array(arr, dtype=np.float64)

    def state_copy(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def frozen(self) -> "UmaSplitModel":
        """A view sharing parameter arrays but building no gradient tape."""
        view = object.__new__(UmaSplitModel)
        view.config = self.config
        view.params = {name: Tensor(t.data, name=name) for name, t in self.params.items()}
        return view

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    # ------------------------------------------------------------------ forward

    def forward_batch(self, features: Sequence[np.ndarray],
                      rng: np.random.Generator | None = None) -> BatchOutput:
        cfg, p = self.config, self.params
        raw_lengths = np.array([f.shape[0] for f in features])
        if raw_lengths.min() < 7:
            raise UtteranceTooShort("utterance too short for subsampling")
        if any(f.shape[1] != cfg.feat_dim for f in features):
            raise ad.ShapeError(f"features must have {cfg.feat_dim} columns")
        batch = np.zeros((len(features), raw_lengths.max(), cfg.feat_dim))
        for b, f in enumerate(features):
            batch[b, :f.shape[0]] = f
        sub_len = np.array([subsampled_length(int(t)) for t in raw_lengths])

        x = add_positions(conv_subsample(Tensor(batch), p))
        pad = np.arange(x.shape[1])[None, :] >= sub_len[:, None]
        inters: list[HeadOutput] = []
        for layer in range(1, cfg.high_rate_layers + 1):
            x = encoder_block_forward(x, p, f"high.{layer}", cfg.block, pad, rng)
            if layer in cfg.conditioning_layers:
                norm = f"high.sc{layer}.norm"
                if cfg.use_self_conditioning:
                    x, lp = self_condition(x, p, norm)
                else:
                    lp = ctc_head(layer_norm(x, p, norm), p)
                inters.append(HeadOutput(f"high{layer}", lp, sub_len))
        e_h = layer_norm(x, p, "high.norm_out") if cfg.high_rate_output_norm else x

        alpha = predict_weights(e_h, p)
        segs = [find_valleys(alpha.data[b, :sub_len[b]], cfg.boundary) for b in range(len(features))]
        seg_len = np.array([s.num_segments for s in segs])
        c = add_positions(aggregate(e_h, alpha, segs))
        pad = np.arange(c.shape[1])[None, :] >= seg_len[:, None]
        out_len = 2 * seg_len if cfg.use_split else seg_len
        low_inters = []
        for layer in range(1, cfg.low_rate_layers + 1):
            c = encoder_block_forward(c, p, f"low.{layer}", cfg.block, pad, rng)
            if layer in cfg.low_rate_inter_layers:
                low_inters.append(HeadOutput(f"low{layer}", ctc_head(self._output_frames(c), p), out_len))
        final = HeadOutput("final", ctc_head(self._output_frames(c), p), out_len)
        return BatchOutput(final, inters + low_inters, alpha, sub_len, segs, cfg.use_split)

    def _output_frames(self, c: Tensor) -> Tensor:
        if self.config.use_split:
            return split_frames(c, self.params).frames
        return layer_norm(c, self.params, "split.norm_first")

    def forward(self, features: np.ndarray) -> ForwardOutput:
        return self.forward_batch([features]).sample(0)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def first_failing_head(out: BatchOutput, b: int, y: Sequence[int]) -> str | None:
    need = required_frames(y)
    for head in out.heads:
        if head.lengths[b] < need:
            return head.name
    return None


def computable_mask(out: BatchOutput, targets: Sequence[Sequence[int]]) -> np.ndarray:
    return np.array([first_failing_head(out, b, y) is None for b, y in enumerate(targets)], dtype=bool)


def combine_losses(l_ctc, inter: Sequence):
    """total = 0.5 (l_ctc + mean(inter)); works on floats or Tensors."""
    if isinstance(l_ctc, Tensor):
        l_inter = ad.scale(sum(inter[1:], inter[0]), 1.0 / len(inter))
        return l_inter, ad.scale(ad.add(l_ctc, l_inter), 0.5)
    l_inter = sum(inter) / len(inter)
    return l_inter, 0.5 * (l_ctc + l_inter)


def batch_loss(out: BatchOutput, targets: Sequence[Sequence[int]],
               keep: np.ndarray | None = None) -> LossBreakdown:
    """Mean over kept samples of 0.5 (final CTC + mean of intermediate CTC)."""
    idx = np.arange(len(targets)) if keep is None else np.nonzero(keep)[0]
    if idx.size == 0:
        raise CTCIncomputable("CTC incomputable: no computable sample in batch")
    for b in idx:
        head = first_failing_head(out, int(b), targets[b])
        if head is not None:
            raise CTCIncomputable(head=head)
    ys = [list(targets[b]) for b in idx]
    scale = 1.0 / idx.size
    head_means = {}
    losses = []
    for head in out.heads:
        lp = head.logprobs if keep is None else ad.slice_(head.logprobs, (idx,))
        per = ctc_nll(lp, head.lengths[idx], ys)
        mean = ad.scale(ad.sum_(per), scale)
        head_means[head.name] = float(mean.data)
        losses.append(mean)
    l_inter, total = combine_losses(losses[0], losses[1:])
    return LossBreakdown(losses[0], l_inter, total, head_means)


def total_loss(out: ForwardOutput | BatchOutput, y: Sequence[int]) -> LossBreakdown:
    """Loss for one utterance; a ForwardOutput gives float-valued results."""
    if isinstance(out, BatchOutput):
        return batch_loss(out, [y])
    from .ctc import ctc_loss

    heads = [("final", out.final_logprobs), *out.intermediate_logprobs]
    values = []
    for name, lp in heads:
        try:
            values.append(float(ctc_loss(lp, y).data))
        except CTCIncomputable:
            raise CTCIncomputable(head=name) from None
    l_inter, total = combine_losses(values[0], values[1:])
    return LossBreakdown(Tensor(values[0]), Tensor(l_inter), Tensor(total),
                         dict(zip((h for h, _ in heads), values)))


# ---------------------------------------------------------------------------
# checkpoints: parameter container + flat config, written as a pair
# ---------------------------------------------------------------------------


def checkpoint_paths(path) -> tuple[Path, Path]:
    base = Path(path)
    return base.with_suffix(".umaw"), base.with_suffix(".cfg")


def save_checkpoint(path, config: ModelConfig, state: dict[str, np.ndarray]) -> None:
    blob = ad.dump_params(state)
    digest = hashlib.sha256(blob).hexdigest()
    weights, cfg = checkpoint_paths(path)
    text = cfgfile.to_text(config) + f"params_sha256 = {digest}\n"
    tmp = cfg.with_name(cfg.name + ".pending")
    atomic_write_bytes(tmp, text.encode())
    atomic_write_bytes(weights, blob)
    os.replace(tmp, cfg)


def load_checkpoint(path) -> UmaSplitModel:
    weights, cfg = checkpoint_paths(path)
    values = cfgfile.read_file(cfg)
    digest = values.pop("params_sha256", None)
    blob = weights.read_bytes()
    if digest is not None and hashlib.sha256(blob).hexdigest() != digest:
        raise ad.FormatError("checkpoint pair mismatch: weights do not match config digest")
    config = cfgfile.build(ModelConfig, values)
    return UmaSplitModel(config, ad.load_params(blob))
