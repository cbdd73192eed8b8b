"""Corpus ingestion, window batching, and a deterministic text generator.

Tokens are raw bytes (vocab 256) unless the file is a pretokenized stream:
a "CTOK" magic, a little-endian u32 format version, then u32 token ids.
The corpus splits once into a training prefix and evaluation suffix;
training batches sample random windows from the prefix, evaluation walks
the suffix in non-overlapping windows so every run scores the same text.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError

CTOK_MAGIC = b"CTOK"
CTOK_VERSION = 1


@dataclass
class Corpus:
    """Token ids plus the train/eval boundary and a content fingerprint."""

    tokens: np.ndarray  # int32 [n]
    split_point: int
    digest: str

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def train_tokens(self) -> np.ndarray:
        return self.tokens[: self.split_point]

    @property
    def eval_tokens(self) -> np.ndarray:
        return self.tokens[self.split_point:]


def _decode_ctok(raw: bytes, path: str) -> np.ndarray:
    if len(raw) < 8:
        raise IngestionError(f"{path}: truncated pretokenized header")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CTOK_VERSION:
        raise IngestionError(
            f"{path}: pretokenized format version {version}, this build reads {CTOK_VERSION}")
    body = raw[8:]
    if len(body) % 4 != 0:
        raise IngestionError(f"{path}: pretokenized payload is not a whole number of u32 ids")
    ids = np.frombuffer(body, dtype="<u4")
    if ids.size and ids.max() > np.iinfo(np.int32).max:
        raise IngestionError(f"{path}: token id {ids.max()} exceeds the supported range")
    return ids.astype(np.int32)


def write_ctok(path, ids) -> None:
    """Write a pretokenized id stream in the format `ingest` reads."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ConfigError(f"token ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= 2 ** 32):
        raise ConfigError("token ids must fit in u32")
    with open(path, "wb") as fh:
        fh.write(CTOK_MAGIC)
        fh.write(struct.pack("<I", CTOK_VERSION))
        fh.write(ids.astype("<u4").tobytes())


def ingest(path, split_fraction: float = 0.99) -> Corpus:
    """Load a byte-level or pretokenized corpus and fix the train/eval split."""
    if not (0.0 < split_fraction < 1.0):
        raise ConfigError(f"split_fraction must be in (0, 1), got {split_fraction}")
    p = Path(path)
    if not p.is_file():
        raise IngestionError(f"corpus file not found: {p}")
    raw = p.read_bytes()
    if not raw:
        raise IngestionError(f"corpus file is empty: {p}")
    if raw[:4] == CTOK_MAGIC:
        tokens = _decode_ctok(raw, str(p))
    else:
        tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int32)
    if tokens.size < 2:
        raise IngestionError(f"corpus needs at least 2 tokens, got {tokens.size}")
    split_point = int(tokens.size * split_fraction)
    split_point = min(max(split_point, 1), tokens.size - 1)
    digest = hashlib.sha256(tokens.astype("<i4").tobytes()).hexdigest()
    return Corpus(tokens=np.ascontiguousarray(tokens), split_point=split_point, digest=digest)


def sample_train_batch(corpus: Corpus, seq_len: int, batch_size: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One batch of random training windows: inputs and next-token targets,
    both [batch_size, seq_len], drawn entirely from the training prefix."""
    if seq_len < 1 or batch_size < 1:
        raise ConfigError(f"seq_len and batch_size must be >= 1, got {seq_len}, {batch_size}")
    train = corpus.train_tokens
    max_start = train.shape[0] - seq_len - 1
    if max_start < 0:
        raise ConfigError(
            f"training segment has {train.shape[0]} tokens, too short for seq_len {seq_len}")
    starts = rng.integers(0, max_start + 1, size=batch_size)
    offsets = np.arange(seq_len + 1)
    windows = train[starts[:, None] + offsets[None, :]]
    return windows[:, :-1], windows[:, 1:]


def train_batches(corpus: Corpus, seq_len: int, batch_size: int, seed: int):
    """Endless deterministic stream of training batches for a given seed."""
    rng = np.random.default_rng(seed)
    while True:
        yield sample_train_batch(corpus, seq_len, batch_size, rng)


def eval_batches(corpus: Corpus, seq_len: int, batch_size: int):
    """Non-overlapping evaluation windows, batched; the final batch may be
    short and any tail shorter than one window is dropped."""
    if seq_len < 1 or batch_size < 1:
        raise ConfigError(f"seq_len and batch_size must be >= 1, got {seq_len}, {batch_size}")
    seg = corpus.eval_tokens
    n_windows = (seg.shape[0] - 1) // seq_len
    if n_windows < 1:
        raise ConfigError(
            f"evaluation segment has {seg.shape[0]} tokens, too short for seq_len {seq_len}")
    starts = np.arange(n_windows) * seq_len
    offsets = np.arange(seq_len + 1)
    for lo in range(0, n_windows, batch_size):
        chunk = starts[lo: lo + batch_size]
        windows = seg[chunk[:, None] + offsets[None, :]]
        yield windows[:, :-1], windows[:, 1:]


def unigram_entropy(corpus: Corpus) -> float:
    """Entropy in nats of the corpus token histogram, the loss a frequency
    table achieves with no context at all."""
    counts = np.bincount(corpus.tokens)
    p = counts[counts > 0].astype(np.float64)
    p /= p.sum()
    return float(-(p * np.log(p)).sum())


# --- deterministic corpus synthesis ---

_NOUNS = (
    "river road harbor ship garden door stone letter winter market lamp "
    "mountain window bridge forest cellar clock engine valley farmer sailor "
    "merchant teacher doctor child captain horse wagon storm island tower "
    "candle village baker miller smith hunter fisher weaver mason").split()
_ADJECTIVES = (
    "old quiet bright narrow broken long heavy pale cold distant green "
    "silent rough golden small tired patient careful steady wooden").split()
_VERBS = (
    "crossed watched followed repaired opened carried remembered reached "
    "counted painted guarded measured traded visited described cleaned "
    "closed studied gathered built").split()
_ADVERBS = "slowly again carefully quietly twice rarely soon together finally often".split()


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / (np.arange(n) + 2.0)
    return w / w.sum()


def synthesize_text(n_chars: int, seed: int = 0) -> str:
    """Deterministic pseudo-English prose of at least `n_chars` characters.

    Each paragraph picks one topic noun that keeps reappearing, so the text
    carries predictable medium-range structure on top of word statistics.
    """
    if n_chars < 1:
        raise ConfigError(f"n_chars must be >= 1, got {n_chars}")
    rng = np.random.default_rng(seed)
    noun_w = _zipf_weights(len(_NOUNS))
    adj_w = _zipf_weights(len(_ADJECTIVES))
    verb_w = _zipf_weights(len(_VERBS))
    adv_w = _zipf_weights(len(_ADVERBS))
    pieces: list[str] = []
    total = 0
    while total < n_chars:
        topic = rng.choice(_NOUNS, p=noun_w)
        n_sentences = int(rng.integers(3, 8))
        sentences = []
        for _ in range(n_sentences):
            subj = topic if rng.random() < 0.55 else rng.choice(_NOUNS, p=noun_w)
            obj = rng.choice(_NOUNS, p=noun_w)
            adj = rng.choice(_ADJECTIVES, p=adj_w)
            verb = rng.choice(_VERBS, p=verb_w)
            form = rng.random()
            if form < 0.5:
                s = f"the {adj} {subj} {verb} the {obj}"
            elif form < 0.8:
                adv = rng.choice(_ADVERBS, p=adv_w)
                s = f"the {subj} {adv} {verb} the {adj} {obj}"
            else:
                n = int(rng.integers(2, 9))
                s = f"the {subj} {verb} {n} {obj}s near the {adj} {rng.choice(_NOUNS, p=noun_w)}"
            sentences.append(s + ".")
        para = " ".join(sentences) + "\n\n"
        pieces.append(para)
        total += len(para)
    return "".join(pieces)


def write_corpus(path, n_chars: int, seed: int = 0) -> str:
    """Synthesize text, write it as UTF-8, and return its sha256 digest."""
    text = synthesize_text(n_chars, seed)
    Path(path).write_bytes(text.encode("utf-8"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
