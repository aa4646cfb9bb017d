"""Synthetic utterances with known token spans, and the UMAD dataset format.

Each utterance is a run of "syllables". A syllable carries one token, or
with probability ``pair_prob`` two distinct tokens that share one acoustic
span: the span length is drawn per token and summed, and every frame shows
the mean of both embeddings. Pair members are emitted in ascending id order
so the target stays a function of the audio.
Adjacent tokens never repeat, so every target is embeddable by one CTC
label per frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .io_util import FormatError, Reader, atomic_write_bytes


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 30
    frames_per_token: tuple[int, int] = (16, 24)
    tokens_per_utt: tuple[int, int] = (4, 8)
    feat_dim: int = 16
    noise_std: float = 0.1
    pair_prob: float = 0.0
    seed: int = 0
    vocab_seed: int = 1234
    frame_shift: float = 0.01

    def __post_init__(self):
        lo, hi = self.frames_per_token
        if lo < 1 or hi < lo:
            raise ValueError("frames_per_token needs 1 <= lo <= hi")
        lo, hi = self.tokens_per_utt
        if lo < 1 or hi < lo:
            raise ValueError("tokens_per_utt needs 1 <= lo <= hi")
        if not 0.0 <= self.pair_prob <= 1.0:
            raise ValueError("pair_prob must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be >= 3")


@dataclass
class Sample:
    features: np.ndarray  # (T, F)
    tokens: list[int]
    spans: list[tuple[tuple[int, ...], int, int]] = field(default_factory=list)  # 1-based inclusive

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    def duration(self, frame_shift: float | Fraction = Fraction(1, 100)) -> Fraction:
        return Fraction(self.num_frames) * Fraction(frame_shift)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes()
                and self.tokens == other.tokens and self.spans == other.spans)


def token_embeddings(vocab_size: int, feat_dim: int, seed: int) -> np.ndarray:
    """Row k (1..V) is a unit-norm Gaussian direction for token k; row 0 unused."""
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(vocab_size + 1, feat_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    emb[0] = 0.0
    return emb


def generate_sample(cfg: SynthConfig, seed: int, embeddings: np.ndarray | None = None) -> Sample:
    if embeddings is None:
        embeddings = token_embeddings(cfg.vocab_size, cfg.feat_dim, cfg.vocab_seed)
    rng = np.random.default_rng([cfg.seed, seed])
    remaining = int(rng.integers(cfg.tokens_per_utt[0], cfg.tokens_per_utt[1] + 1))
    lo, hi = cfg.frames_per_token
    tokens: list[int] = []
    spans = []
    chunks = []
    start = 1
    while remaining:
        prev = tokens[-1] if tokens else 0
        first = _draw_token(rng, cfg.vocab_size, {prev})
        ids: tuple[int, ...] = (first,)
        if remaining >= 2 and rng.random() < cfg.pair_prob:
            ids = tuple(sorted((first, _draw_token(rng, cfg.vocab_size, {prev, first}))))
        # one span-length draw per token; a pair shares the summed span
        length = int(rng.integers(lo, hi + 1, size=len(ids)).sum())
        centre = embeddings[list(ids)].mean(axis=0)
        chunks.append(np.repeat(centre[None, :], length, axis=0))
        spans.append((ids, start, start + length - 1))
        tokens.extend(ids)
        start += length
        remaining -= len(ids)
    feats = np.concatenate(chunks, axis=0)
    if cfg.noise_std > 0:
        feats = feats + rng.normal(scale=cfg.noise_std, size=feats.shape)
    return Sample(feats, tokens, spans)


def _draw_token(rng: np.random.Generator, vocab_size: int, exclude: set[int]) -> int:
    while True:
        k = int(rng.integers(1, vocab_size + 1))
        if k not in exclude:
            return k


def generate_dataset(cfg: SynthConfig, count: int, offset: int = 0) -> list[Sample]:
    emb = token_embeddings(cfg.vocab_size, cfg.feat_dim, cfg.vocab_seed)
    return [generate_sample(cfg, offset + k, emb) for k in range(count)]


# ---------------------------------------------------------------------------
# UMAD file format
# ---------------------------------------------------------------------------

DATA_MAGIC = b"UMAD"
DATA_VERSION = 1


def dump_dataset(samples: Sequence[Sample]) -> bytes:
    parts = [DATA_MAGIC, struct.pack("<II", DATA_VERSION, len(samples))]
    for s in samples:
        t, f = s.features.shape
        parts.append(struct.pack("<II", t, f))
        parts.append(np.ascontiguousarray(s.features, dtype="<f8").tobytes())
        parts.append(struct.pack(f"<I{len(s.tokens)}I", len(s.tokens), *s.tokens))
        parts.append(struct.pack("<I", len(s.spans)))
        for ids, lo, hi in s.spans:
            parts.append(struct.pack(f"<I{len(ids)}III", len(ids), *ids, lo, hi))
    return b"".join(parts)


def load_dataset(blob: bytes) -> list[Sample]:
    r = Reader(blob)
    if r.take(4) != DATA_MAGIC:
        raise FormatError("bad magic: not a UMAD dataset")
    version, count = r.unpack("<II")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported UMAD version {version}")
    samples = []
    for _ in range(count):
        t, f = r.unpack("<II")
        feats = np.frombuffer(r.take(8 * t * f), dtype="<f8").astype(np.float64).reshape(t, f)
        (n,) = r.unpack("<I")
        tokens = list(r.unpack(f"<{n}I"))
        (n_spans,) = r.unpack("<I")
        spans = []
        for _ in range(n_spans):
            (k,) = r.unpack("<I")
            ids = r.unpack(f"<{k}I")
            lo, hi = r.unpack("<II")
            spans.append((tuple(ids), lo, hi))
        samples.append(Sample(feats, tokens, spans))
    if r.pos != len(blob):
        raise FormatError(f"trailing bytes at offset {r.pos}")
    return samples


def write_dataset(path, samples: Sequence[Sample]) -> None:
    atomic_write_bytes(path, dump_dataset(samples))


def read_dataset(path) -> list[Sample]:
    with open(path, "rb") as fh:
        return load_dataset(fh.read())
