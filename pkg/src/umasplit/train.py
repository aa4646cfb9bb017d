"""Optimisation, batch filtering, checkpoint averaging and evaluation metrics."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .ctc import CTCIncomputable, greedy_decode, required_frames
from .data import Sample
from .model import (BatchOutput, ModelConfig, UmaSplitModel, batch_loss, computable_mask,
                    save_checkpoint)
from .split import classify_slots

log = logging.getLogger(__name__)

BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    base_lr: float = 0.05
    warmup_steps: int = 500
    weight_decay: float = 1e-6
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    nan_skips: int = 0


def lr_schedule(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr / sqrt(warmup)``, then inverse square-root decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return base_lr * min(step ** -0.5, step * warmup ** -1.5)


def adamw_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: OptimState,
               lr: float | None = None) -> bool:
    """One AdamW update in place. Returns False (and counts it) on non-finite gradients."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.nan_skips += 1
        log.warning("non-finite gradient, skipping step (%d so far)", state.nan_skips)
        return False
    state.step += 1
    t = state.step
    if lr is None:
        lr = lr_schedule(t, state.base_lr, state.warmup_steps)
    b1, b2 = BETAS
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data = p.data * (1.0 - lr * state.weight_decay) - lr * update
    return True


# ---------------------------------------------------------------------------
# batch filtering and checkpoint averaging
# ---------------------------------------------------------------------------


def filter_batch(batch: Sequence[Sample], model: UmaSplitModel) -> tuple[list[Sample], int]:
    """Keep only samples whose every CTC head passes the length test."""
    if not batch:
        return [], 0
    out = model.frozen().forward_batch([s.features for s in batch])
    keep = computable_mask(out, [s.tokens for s in batch])
    kept = [s for s, k in zip(batch, keep) if k]
    return kept, len(batch) - len(kept)


def _digest(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name]).tobytes())
    return h.hexdigest()


def average_checkpoints(checkpoints: Iterable[tuple[float, dict[str, np.ndarray]]],
                        k: int = 10) -> dict[str, np.ndarray]:
    """Element-wise mean of the k checkpoints with the lowest validation loss.

    Ties and summation order are fixed by content, so the result does not
    depend on the order of the input list.
    """
    ranked = sorted(((float(loss), _digest(state), state) for loss, state in checkpoints),
                    key=lambda item: item[:2])
    if not 1 <= k <= len(ranked):
        raise ValueError(f"k={k} must lie in [1, {len(ranked)}]")
    chosen = [state for _, _, state in ranked[:k]]
    ref = chosen[0]
    for state in chosen[1:]:
        if state.keys() != ref.keys():
            raise ValueError("checkpoints have different parameter names")
        for name in ref:
            if state[name].shape != ref[name].shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
    return {name: sum((s[name] for s in chosen[1:]), chosen[0][name].copy()) / k for name in ref}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class EditResult:
    edits: int
    rate: float
    empty_reference: bool = False

    def __iter__(self):
        yield self.edits
        yield self.rate


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def error_rate(hyp: Sequence, ref: Sequence) -> EditResult:
    edits = edit_distance(list(hyp), list(ref))
    if len(ref) == 0:
        return EditResult(edits, float(len(hyp)), empty_reference=len(hyp) > 0)
    return EditResult(edits, edits / len(ref))


@dataclass
class UmaStats:
    token_rate: float
    frame_rate_before: float
    frame_rate_after: float
    nonblank_ratio: float
    two_nonblank_ratio: float | None  # None when no frame emits a token

    COLUMNS = ("token_rate_tps", "frame_rate_before_fps", "frame_rate_after_fps",
               "nonblank", "two_nonblank")


def frame_rates(sub_frames: int, segments: int, duration: Fraction) -> tuple[Fraction, Fraction]:
    """Exact (before, after) UMA frame rates for one utterance."""
    return Fraction(sub_frames) / duration, Fraction(segments) / duration


def uma_statistics(outcomes: Sequence[Sequence[tuple[int, int]]], durations: Sequence[Fraction],
                   sub_frames: Sequence[int], num_tokens: Sequence[int]) -> UmaStats:
    """Rate and split statistics from per-frame (slot1, slot2) argmax outcomes."""
    total = Fraction(sum((Fraction(d) for d in durations), Fraction(0)))
    frames = sum(len(o) for o in outcomes)
    counts = [classify_slots(a, b) for o in outcomes for a, b in o]
    nonblank = sum(1 for c in counts if c >= 1)
    two = sum(1 for c in counts if c == 2)
    return UmaStats(
        token_rate=float(Fraction(sum(num_tokens)) / total),
        frame_rate_before=float(Fraction(sum(sub_frames)) / total),
        frame_rate_after=float(Fraction(frames) / total),
        nonblank_ratio=nonblank / frames if frames else 0.0,
        two_nonblank_ratio=two / nonblank if nonblank else None,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class UtteranceResult:
    hyp: list[int]
    ref: list[int]
    raw_frames: int
    sub_frames: int
    segments: int
    final_length: int
    computable: bool
    outcomes: list[tuple[int, int]]


@dataclass
class EvalResult:
    utterances: list[UtteranceResult]
    frame_shift: float

    @property
    def token_error_rate(self) -> float:
        edits = sum(edit_distance(u.hyp, u.ref) for u in self.utterances)
        return edits / max(1, sum(len(u.ref) for u in self.utterances))

    @property
    def incomputable_fraction(self) -> float:
        return sum(not u.computable for u in self.utterances) / max(1, len(self.utterances))

    def durations(self) -> list[Fraction]:
        shift = Fraction(self.frame_shift).limit_denominator(10 ** 6)
        return [u.raw_frames * shift for u in self.utterances]

    def stats(self) -> UmaStats:
        return uma_statistics([u.outcomes for u in self.utterances], self.durations(),
                              [u.sub_frames for u in self.utterances],
                              [len(u.ref) for u in self.utterances])


def _evaluate_chunk(model: UmaSplitModel, chunk: Sequence[Sample]) -> list[UtteranceResult]:
    out = model.forward_batch([s.features for s in chunk])
    keep = computable_mask(out, [s.tokens for s in chunk])
    results = []
    for b, s in enumerate(chunk):
        fo = out.sample(b)
        results.append(UtteranceResult(
            hyp=greedy_decode(fo.final_logprobs), ref=list(s.tokens), raw_frames=s.num_frames,
            sub_frames=int(out.subsampled_lengths[b]), segments=fo.num_segments,
            final_length=int(fo.final_logprobs.shape[0]), computable=bool(keep[b]),
            outcomes=fo.slot_outcomes()))
    return results


def evaluate(model: UmaSplitModel, samples: Sequence[Sample], batch_size: int = 32,
             workers: int = 1, frame_shift: float = 0.01) -> EvalResult:
    frozen = model.frozen()
    chunks = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _evaluate_chunk(frozen, c), chunks))
    else:
        parts = [_evaluate_chunk(frozen, c) for c in chunks]
    return EvalResult([u for part in parts for u in part], frame_shift)


def validation_loss(model: UmaSplitModel, samples: Sequence[Sample], batch_size: int = 32) -> float:
    """Mean total loss over computable samples; inf if none is computable or UMA degenerates."""
    frozen = model.frozen()
    total, count = 0.0, 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        ys = [s.tokens for s in chunk]
        try:
            out = frozen.forward_batch([s.features for s in chunk])
        except FloatingPointError:
            return math.inf
        keep = computable_mask(out, ys)
        if keep.any():
            total += float(batch_loss(out, ys, keep).total.data) * int(keep.sum())
            count += int(keep.sum())
    return total / count if count else math.inf


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 0.05
    warmup: int = 500
    weight_decay: float = 1e-6
    seed: int = 0
    eval_every: int = 100
    keep_best: int = 10
    grad_clip: float = 5.0


@dataclass
class StepRecord:
    step: int
    lr: float
    total: float
    l_ctc: float
    l_inter: float
    skipped: int

    def line(self) -> str:
        return (f"{self.step}\t{self.lr:.6e}\t{self.total:.6f}\t{self.l_ctc:.6f}\t"
                f"{self.l_inter:.6f}\t{self.skipped}")


@dataclass
class TrainResult:
    model: UmaSplitModel
    history: list[StepRecord]
    checkpoints: list[tuple[int, float]]  # (step, validation loss) of every saved checkpoint
    nan_steps: int = 0

    @property
    def log_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.history)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    if max_norm <= 0:
        return
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def _update(model: UmaSplitModel, out: BatchOutput, ys, state: OptimState, lr: float,
            cfg: TrainConfig, step: int) -> StepRecord:
    """Filter, take the loss on kept samples, and apply one AdamW step."""
    keep = computable_mask(out, ys)
    skipped = int((~keep).sum())
    if not keep.any():
        log.info("step %d: whole batch incomputable, no update", step)
        return StepRecord(step, lr, math.nan, math.nan, math.nan, skipped)
    loss = batch_loss(out, ys, keep)
    if math.isfinite(float(loss.total.data)):
        grads = ad.backward(loss.total, model.params)
        _clip(grads, cfg.grad_clip)
        adamw_step(model.params, grads, state, lr)
    else:
        log.warning("step %d: non-finite loss, no update", step)
    return StepRecord(step, lr, float(loss.total.data), float(loss.l_ctc.data),
                      float(loss.l_inter.data), skipped)


def train(model: UmaSplitModel, train_set: Sequence[Sample], val_set: Sequence[Sample],
          cfg: TrainConfig, log_path: Path | None = None, out_dir: Path | None = None,
          progress=None) -> TrainResult:
    """Run AdamW on the combined loss; returns the averaged best-k model.

    Samples with an incomputable CTC head are dropped from the batch before
    the loss. Every ``eval_every`` steps a checkpoint is scored on
    ``val_set``; the final parameters average the ``keep_best`` best ones.
    """
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1]) if model.config.dropout > 0 else None
    state = OptimState(cfg.lr, cfg.warmup, cfg.weight_decay)
    history: list[StepRecord] = []
    kept: list[tuple[float, int, dict[str, np.ndarray]]] = []
    saved: list[tuple[int, float]] = []
    order = rng.permutation(len(train_set))
    cursor = 0
    nan_steps = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            if cursor + cfg.batch > len(order):
                order, cursor = rng.permutation(len(train_set)), 0
            batch = [train_set[i] for i in order[cursor:cursor + cfg.batch]]
            cursor += cfg.batch
            lr = lr_schedule(step, cfg.lr, cfg.warmup)
            ys = [s.tokens for s in batch]
            try:
                out = model.forward_batch([s.features for s in batch], drop_rng)
            except FloatingPointError as exc:
                nan_steps += 1
                log.warning("step %d: %s, no update", step, exc)
                out = None
            if out is None:
                rec = StepRecord(step, lr, math.nan, math.nan, math.nan, 0)
            else:
                rec = _update(model, out, ys, state, lr, cfg, step)
                nan_steps += not math.isfinite(rec.total) and rec.skipped < len(ys)
            history.append(rec)
            if log_fh:
                log_fh.write(rec.line() + "\n")
            if step % cfg.eval_every == 0 or step == cfg.steps:
                vloss = validation_loss(model, val_set) if val_set else rec.total
                saved.append((step, vloss))
                kept.append((vloss, step, model.state_copy()))
                kept.sort(key=lambda item: item[:2])
                del kept[cfg.keep_best:]
                if progress:
                    progress(step, rec, vloss)
    finally:
        if log_fh:
            log_fh.close()
    finite = [(loss, st) for loss, _, st in kept if math.isfinite(loss)]
    if finite:
        model.load_state(average_checkpoints(finite, k=min(cfg.keep_best, len(finite))))
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "model", model.config, model.state())
    return TrainResult(model, history, saved, nan_steps + state.nan_skips)


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([np.nanmean(v)]) if v.size else v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
