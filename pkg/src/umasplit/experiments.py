"""Desk-scale synthetic regimes used by the acceptance suite.

``mandarin``: one token per syllable, 4-6 subsampled frames per token.
``english``: most syllables carry two tokens, 2-3 subsampled frames per token,
so the token rate approaches the rate of UMA segments.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

from .data import Sample, SynthConfig, generate_dataset
from .model import ModelConfig, UmaSplitModel
from .train import EvalResult, TrainConfig, TrainResult, evaluate, train

# raw frames per token; the 4x subsampler turns these into 4-6 and 2-3 frames
REGIMES = {
    "mandarin": SynthConfig(pair_prob=0.0, frames_per_token=(16, 24), tokens_per_utt=(5, 10)),
    "english": SynthConfig(pair_prob=0.8, frames_per_token=(8, 12), tokens_per_utt=(5, 10)),
}
TRAIN_COUNT, TEST_COUNT, VAL_COUNT = 2000, 200, 100
TEST_OFFSET = 100_000


@dataclass
class Splits:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


def make_splits(regime: str, test_count: int = TEST_COUNT) -> Splits:
    cfg = REGIMES[regime]
    pool = generate_dataset(cfg, TRAIN_COUNT)
    return Splits(pool[:-VAL_COUNT], pool[-VAL_COUNT:],
                  generate_dataset(cfg, test_count, offset=TEST_OFFSET))


@dataclass
class RunResult:
    train: TrainResult
    eval: EvalResult
    seconds: float


def run(regime: str, steps: int, use_split: bool = True, seed: int = 0,
        out_dir: Path | None = None, splits: Splits | None = None) -> RunResult:
    splits = splits or make_splits(regime)
    feat_dim = REGIMES[regime].feat_dim
    model = UmaSplitModel(ModelConfig(feat_dim=feat_dim, use_split=use_split, seed=seed))
    cfg = dataclasses.replace(TrainConfig(), steps=steps, seed=seed)
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train.log"
    start = time.process_time()
    result = train(model, splits.train, splits.val, cfg, log_path=log_path, out_dir=out_dir)
    seconds = time.process_time() - start
    return RunResult(result, evaluate(result.model, splits.test), seconds)
