"""Split module: two candidate token slots per aggregated frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import FfnSpec, Params, ffn_forward, init_ffn, init_layer_norm, layer_norm

SPLIT_EXPANSION = 4


@dataclass
class SplitOutput:
    frames: Tensor  # (..., 2I, D)

    def provenance(self, j: int) -> tuple[int, str]:
        """1-based output index -> (1-based aggregated frame, slot)."""
        return (j + 1) // 2, "first" if j % 2 else "second"


def init_split(rng: np.random.Generator, dim: int, prefix: str = "split") -> dict[str, np.ndarray]:
    out = init_layer_norm(f"{prefix}.norm_first", dim)
    out.update(init_layer_norm(f"{prefix}.norm_second", dim))
    out.update(init_ffn(rng, f"{prefix}.ffn", FfnSpec(dim, SPLIT_EXPANSION, dim)))
    return out


def split_frames(e_l: Tensor, params: Params, prefix: str = "split") -> SplitOutput:
    """s_{2i-1} = LN1(e_i), s_{2i} = LN2(FFN(e_i)); (..., I, D) -> (..., 2I, D)."""
    first = layer_norm(e_l, params, f"{prefix}.norm_first")
    second = layer_norm(ffn_forward(e_l, params, f"{prefix}.ffn"), params, f"{prefix}.norm_second")
    lead, (i, d) = e_l.shape[:-2], e_l.shape[-2:]
    slots = ad.concat([ad.reshape(first, lead + (i, 1, d)),
                       ad.reshape(second, lead + (i, 1, d))], axis=-2)
    return SplitOutput(ad.reshape(slots, lead + (2 * i, d)))


def classify_slots(first: int, second: int, blank: int = 0) -> int:
    """Number of non-blank tokens one aggregated frame contributes (0, 1 or 2)."""
    if first == blank and second == blank:
        return 0
    if first != blank and second != blank and first != second:
        return 2
    return 1
