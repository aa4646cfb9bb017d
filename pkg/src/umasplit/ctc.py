"""CTC loss, its brute-force oracle, greedy decoding and self-conditioning.

Blank is id 0 throughout. Log-probabilities have shape (N, V+1), or
(B, N, V+1) for the batched loss.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Params, layer_norm, linear

BLANK = 0


class CTCIncomputable(ValueError):
    """The frame sequence is too short to embed the target."""

    def __init__(self, message: str = "CTC incomputable", head: str | None = None):
        if head is not None:
            message = f"{message} (head: {head})"
        super().__init__(message)
        self.head = head


def required_frames(y: Sequence[int]) -> int:
    """Minimum alignment length: one frame per label plus a blank between repeats."""
    y = list(y)
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def is_computable(num_frames: int, y: Sequence[int]) -> bool:
    return len(y) > 0 and num_frames >= required_frames(y)


def _check_targets(targets: Sequence[Sequence[int]], num_classes: int) -> None:
    for y in targets:
        if len(y) == 0:
            raise ValueError("empty target sequence")
        if min(y) < 1 or max(y) >= num_classes:
            raise ValueError(f"target ids must lie in [1, {num_classes - 1}]")


def _logsumexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def ctc_nll(lp: Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]]) -> Tensor:
    """Per-sample CTC negative log-likelihood, (B, N, C) -> (B,).

    The log-space forward recursion is taped once per time step; the reverse
    pass walks the same recursion backwards, distributing each state's adjoint
    over the log-sum-exp inputs by their softmax weights.
    """
    x = lp.data
    b_size, n_max, num_classes = x.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    _check_targets(targets, num_classes)
    bad = [k for k, (n, y) in enumerate(zip(lengths, targets)) if not is_computable(int(n), y)]
    if bad:
        raise CTCIncomputable()
    if lengths.max() > n_max or lengths.min() < 1:
        raise ValueError("lengths out of range")

    s_len = np.array([2 * len(y) + 1 for y in targets])
    s_max = int(s_len.max())
    ext = np.zeros((b_size, s_max), dtype=np.int64)
    for k, y in enumerate(targets):
        ext[k, 1:2 * len(y):2] = y
    valid = np.arange(s_max)[None, :] < s_len[:, None]
    skip = np.zeros((b_size, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])

    emit = np.take_along_axis(x, np.broadcast_to(ext[:, None, :], (b_size, n_max, s_max)), axis=2)
    neg_inf = -np.inf
    alpha = np.full((b_size, n_max, s_max), neg_inf)
    lse = np.full((b_size, n_max, s_max), neg_inf)
    alpha[:, 0, 0] = emit[:, 0, 0]
    alpha[:, 0, 1] = emit[:, 0, 1]
    pad1 = np.full((b_size, 1), neg_inf)
    pad2 = np.full((b_size, 2), neg_inf)
    for t in range(1, n_max):
        prev = alpha[:, t - 1]
        p1 = np.concatenate([pad1, prev[:, :-1]], axis=1)
        p2 = np.where(skip, np.concatenate([pad2, prev[:, :-2]], axis=1), neg_inf)
        cur = _logsumexp3(prev, p1, p2)
        cur = np.where(valid, cur, neg_inf)
        active = (t < lengths)[:, None]
        lse[:, t] = np.where(active, cur, neg_inf)
        alpha[:, t] = np.where(active, cur + emit[:, t], prev)

    rows = np.arange(b_size)
    last = alpha[:, n_max - 1]
    end_a, end_b = last[rows, s_len - 1], last[rows, s_len - 2]
    ll = np.logaddexp(end_a, end_b)
    if not np.all(np.isfinite(ll)):
        raise CTCIncomputable()

    def backward(g):
        adj = np.zeros((b_size, s_max))
        adj[rows, s_len - 1] = -g * np.exp(end_a - ll)
        adj[rows, s_len - 2] = -g * np.exp(end_b - ll)
        g_emit = np.zeros_like(emit)
        zeros1 = np.zeros((b_size, 1))
        zeros2 = np.zeros((b_size, 2))
        with np.errstate(invalid="ignore"):
            for t in range(n_max - 1, 0, -1):
                active = (t < lengths)[:, None]
                g_emit[:, t] = np.where(active, adj, 0.0)
                prev = alpha[:, t - 1]
                ref = lse[:, t]
                live = np.isfinite(ref)
                w0 = np.where(live, np.exp(prev - ref), 0.0)
                w1 = np.where(live[:, 1:], np.exp(prev[:, :-1] - ref[:, 1:]), 0.0)
                w2 = np.where(live[:, 2:] & skip[:, 2:], np.exp(prev[:, :-2] - ref[:, 2:]), 0.0)
                back = adj * w0
                back += np.concatenate([adj[:, 1:] * w1, zeros1], axis=1)
                back += np.concatenate([adj[:, 2:] * w2, zeros2], axis=1)
                adj = np.where(active, back, adj)
        g_emit[:, 0] = adj
        onehot = np.zeros((b_size, s_max, num_classes))
        onehot[rows[:, None], np.arange(s_max)[None, :], ext] = valid
        return (np.matmul(g_emit, onehot),)

    return ad.make_node(-ll, (lp,), backward, "ctc")


def ctc_loss(lp: Tensor | np.ndarray, y: Sequence[int]) -> Tensor:
    """-log p(y | lp) for one utterance; lp is (N, V+1) log-probabilities."""
    lp = lp if isinstance(lp, Tensor) else Tensor(lp)
    n = lp.shape[0]
    if not is_computable(n, y):
        raise CTCIncomputable()
    out = ctc_nll(ad.reshape(lp, (1,) + lp.shape), [n], [list(y)])
    return ad.reshape(out, ())


def ctc_loss_bruteforce(lp: np.ndarray, y: Sequence[int], max_paths: int = 10 ** 7) -> float:
    """Sum the probability of every frame-level string that collapses to y."""
    lp = np.asarray(lp.data if isinstance(lp, Tensor) else lp, dtype=np.float64)
    n, c = lp.shape
    if c ** n > max_paths:
        raise ValueError(f"state space {c}^{n} exceeds {max_paths}")
    y = np.asarray(list(y), dtype=np.int64)
    paths = np.indices((c,) * n).reshape(n, -1).T
    prev = np.concatenate([np.full((paths.shape[0], 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != BLANK) & (paths != prev)
    count = keep.sum(axis=1)
    slot = np.clip(np.cumsum(keep, axis=1) - 1, 0, max(len(y) - 1, 0))
    if len(y):
        match = np.all(~keep | (paths == y[slot]), axis=1) & (count == len(y))
    else:
        match = count == 0
    if not match.any():
        raise CTCIncomputable()
    scores = lp[np.arange(n)[None, :], paths[match]].sum(axis=1)
    top = scores.max()
    return float(-(top + np.log(np.exp(scores - top).sum())))


def collapse(path: Sequence[int]) -> list[int]:
    out, prev = [], None
    for k in path:
        if k != prev and k != BLANK:
            out.append(int(k))
        prev = k
    return out


def greedy_decode(lp) -> list[int]:
    """Per-frame argmax, merge repeats, drop blanks."""
    data = lp.data if isinstance(lp, Tensor) else np.asarray(lp)
    return collapse(np.argmax(data, axis=-1).tolist())


def ctc_head(hidden: Tensor, params: Params, prefix: str = "ctc_head") -> Tensor:
    return ad.log_softmax(linear(hidden, params, prefix))


def self_condition(hidden: Tensor, params: Params, norm_prefix: str,
                   head_prefix: str = "ctc_head",
                   back_prefix: str = "sc_back") -> tuple[Tensor, Tensor]:
    """LN(h) + back_proj(softmax(head(LN(h)))); also returns the head's log-probs."""
    normed = layer_norm(hidden, params, norm_prefix)
    logits = linear(normed, params, head_prefix)
    log_probs = ad.log_softmax(logits)
    conditioned = ad.add(normed, linear(ad.softmax(logits), params, back_prefix))
    return conditioned, log_probs
