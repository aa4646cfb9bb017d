"""Unimodal aggregation: frame weights, valley detection, segment means."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Params, ffn_forward

BOUNDARY_MODES = ("shared", "right")


@dataclass(frozen=True)
class UmaSegmentation:
    """Valley indices and 1-based inclusive frame spans of each segment."""

    valleys: tuple[int, ...]
    segments: tuple[tuple[int, int], ...]

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    @property
    def num_frames(self) -> int:
        return self.valleys[-1]

    def membership(self, num_frames: int | None = None, num_segments: int | None = None) -> np.ndarray:
        """0/1 matrix (I, T); optional padding to larger sizes."""
        t = num_frames or self.num_frames
        i = num_segments or self.num_segments
        m = np.zeros((i, t))
        for k, (lo, hi) in enumerate(self.segments):
            m[k, lo - 1:hi] = 1.0
        return m

    def segment_ids(self) -> list[list[int]]:
        """Per frame (1-based order), the segment ids (1-based) containing it."""
        owners: list[list[int]] = [[] for _ in range(self.num_frames)]
        for k, (lo, hi) in enumerate(self.segments, start=1):
            for t in range(lo, hi + 1):
                owners[t - 1].append(k)
        return owners


def predict_weights(e_h: Tensor, params: Params, prefix: str = "uma.ffn") -> Tensor:
    """alpha_t = sigmoid(FFN(e_t)); (..., T, D) -> (..., T)."""
    logits = ffn_forward(e_h, params, prefix)
    return ad.sigmoid(ad.reshape(logits, logits.shape[:-1]))


def find_valleys(alpha: Sequence[float] | np.ndarray, boundary: str = "shared") -> UmaSegmentation:
    """Valleys are frames t in [2, T-1] with alpha_t <= both neighbours, plus 0 and T.

    With ``boundary="shared"`` segment i spans max(tau_i, 1)..tau_{i+1}, so a
    valley frame belongs to both neighbouring segments. ``"right"`` gives
    each interior valley frame to the segment that starts at it.
    """
    if boundary not in BOUNDARY_MODES:
        raise ValueError(f"boundary must be one of {BOUNDARY_MODES}")
    a = np.asarray(alpha, dtype=np.float64).reshape(-1)
    t = a.size
    if t < 1:
        raise ValueError("need at least one frame")
    mid = a[1:-1]
    interior = np.nonzero((mid <= a[:-2]) & (mid <= a[2:]))[0] + 2
    valleys = (0, *interior.tolist(), t)
    segments = []
    for k in range(len(valleys) - 1):
        lo, hi = max(valleys[k], 1), valleys[k + 1]
        if boundary == "right" and k < len(valleys) - 2:
            hi -= 1
        segments.append((lo, hi))
    return UmaSegmentation(valleys, tuple(segments))


def aggregate(e_h: Tensor, alpha: Tensor, segs: UmaSegmentation | Sequence[UmaSegmentation]) -> Tensor:
    """c_i = sum_{t in seg i} alpha_t e_t / sum_{t in seg i} alpha_t.

    ``e_h`` is (T, D) with one segmentation, or (B, T, D) with one per batch
    row, in which case the result is zero-padded to (B, max I, D).
    """
    if isinstance(segs, UmaSegmentation):
        return ad.segment_weighted_mean(e_h, alpha, segs.membership(e_h.shape[0]))
    return ad.segment_weighted_mean(e_h, alpha, batch_membership(segs, e_h.shape[1]))


def batch_membership(segs: Sequence[UmaSegmentation], num_frames: int) -> np.ndarray:
    width = max(s.num_segments for s in segs)
    return np.stack([s.membership(num_frames, width) for s in segs])


def dump_rows(alpha: np.ndarray, seg: UmaSegmentation) -> list[str]:
    """Tab-separated ``frame_index, alpha, is_valley, segment_id`` lines.

    A shared valley frame lists both segment ids joined by a comma.
    """
    valleys = set(seg.valleys)
    rows = ["frame_index\talpha\tis_valley\tsegment_id"]
    for t, owners in enumerate(seg.segment_ids(), start=1):
        ids = ",".join(str(k) for k in owners)
        rows.append(f"{t}\t{alpha[t - 1]:.6f}\t{int(t in valleys)}\t{ids}")
    return rows
