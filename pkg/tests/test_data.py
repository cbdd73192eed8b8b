"""Corpus ingestion, batching, and synthesis tests."""

import hashlib
import math
import struct

import numpy as np
import pytest

from carope import data as dt
from carope.errors import ConfigError, IngestionError


def write_bytes(tmp_path, payload: bytes, name="corpus.bin"):
    p = tmp_path / name
    p.write_bytes(payload)
    return p


class TestByteIngestion:
    def test_text_maps_to_byte_ids(self, tmp_path):
        c = dt.ingest(write_bytes(tmp_path, b"abc"))
        assert c.tokens.tolist() == [97, 98, 99]
        assert c.tokens.dtype == np.int32

    def test_digest_is_sha256_of_id_stream(self, tmp_path):
        c = dt.ingest(write_bytes(tmp_path, b"hello world"))
        want = hashlib.sha256(
            np.frombuffer(b"hello world", dtype=np.uint8).astype("<i4").tobytes()
        ).hexdigest()
        assert c.digest == want

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError, match="not found"):
            dt.ingest(tmp_path / "nope.txt")

    def test_empty_file(self, tmp_path):
        with pytest.raises(IngestionError, match="empty"):
            dt.ingest(write_bytes(tmp_path, b""))

    def test_single_token_rejected(self, tmp_path):
        with pytest.raises(IngestionError, match="at least 2"):
            dt.ingest(write_bytes(tmp_path, b"x"))


class TestPretokenizedIngestion:
    def test_roundtrip(self, tmp_path):
        ids = np.array([0, 7, 300, 65535, 2], dtype=np.int64)
        p = tmp_path / "ids.ctok"
        dt.write_ctok(p, ids)
        c = dt.ingest(p)
        assert c.tokens.tolist() == ids.tolist()

    def test_version_mismatch_names_both_versions(self, tmp_path):
        p = write_bytes(tmp_path, dt.CTOK_MAGIC + struct.pack("<I", 9) + b"\0" * 8)
        with pytest.raises(IngestionError, match=r"version 9.*reads 1"):
            dt.ingest(p)

    def test_truncated_header(self, tmp_path):
        with pytest.raises(IngestionError, match="truncated"):
            dt.ingest(write_bytes(tmp_path, dt.CTOK_MAGIC + b"\x01"))

    def test_ragged_payload(self, tmp_path):
        p = write_bytes(tmp_path, dt.CTOK_MAGIC + struct.pack("<I", 1) + b"\0" * 10)
        with pytest.raises(IngestionError, match="whole number"):
            dt.ingest(p)

    def test_write_ctok_validates_ids(self, tmp_path):
        with pytest.raises(ConfigError):
            dt.write_ctok(tmp_path / "a", np.array([0.5, 1.5]))
        with pytest.raises(ConfigError):
            dt.write_ctok(tmp_path / "b", np.array([-1, 2]))


class TestSplit:
    def test_default_fraction(self, tmp_path):
        c = dt.ingest(write_bytes(tmp_path, bytes(1000)))
        assert c.split_point == 990
        assert c.train_tokens.shape == (990,)
        assert c.eval_tokens.shape == (10,)

    def test_split_clamped_to_leave_both_sides_nonempty(self, tmp_path):
        p = write_bytes(tmp_path, bytes(10))
        assert dt.ingest(p, split_fraction=0.001).split_point == 1
        assert dt.ingest(p, split_fraction=0.999).split_point == 9

    def test_invalid_fraction(self, tmp_path):
        p = write_bytes(tmp_path, bytes(10))
        for frac in (0.0, 1.0, -0.5, 1.5):
            with pytest.raises(ConfigError):
                dt.ingest(p, split_fraction=frac)


def sequential_corpus(tmp_path, n, name="seq.ctok"):
    """Corpus whose token at index i is i, making window positions visible."""
    p = tmp_path / name
    dt.write_ctok(p, np.arange(n))
    return dt.ingest(p)


class TestTrainBatches:
    def test_targets_are_inputs_shifted_by_one(self, tmp_path):
        c = sequential_corpus(tmp_path, 500)
        x, y = dt.sample_train_batch(c, seq_len=16, batch_size=8,
                                     rng=np.random.default_rng(0))
        assert x.shape == y.shape == (8, 16)
        np.testing.assert_array_equal(y, x + 1)
        rows = np.diff(x, axis=1)
        assert np.all(rows == 1)  # each row is one contiguous window

    def test_windows_stay_inside_training_prefix(self, tmp_path):
        c = sequential_corpus(tmp_path, 200)  # split at 198
        rng = np.random.default_rng(1)
        seen_max = 0
        for _ in range(200):
            x, y = dt.sample_train_batch(c, seq_len=8, batch_size=4, rng=rng)
            seen_max = max(seen_max, int(y.max()))
        assert seen_max <= c.split_point - 1
        assert seen_max == c.split_point - 1  # the last legal window is reachable

    def test_stream_is_seed_deterministic(self, tmp_path):
        c = sequential_corpus(tmp_path, 300)
        a = dt.train_batches(c, 8, 4, seed=5)
        b = dt.train_batches(c, 8, 4, seed=5)
        other = dt.train_batches(c, 8, 4, seed=6)
        firsts = []
        for _ in range(3):
            xa, _ = next(a)
            xb, _ = next(b)
            np.testing.assert_array_equal(xa, xb)
            firsts.append(np.array_equal(xa, next(other)[0]))
        assert not all(firsts)

    def test_too_short_training_segment(self, tmp_path):
        c = sequential_corpus(tmp_path, 20)  # train prefix 19 tokens
        with pytest.raises(ConfigError, match="too short"):
            dt.sample_train_batch(c, seq_len=19, batch_size=1,
                                  rng=np.random.default_rng(0))
        x, _ = dt.sample_train_batch(c, seq_len=18, batch_size=1,
                                     rng=np.random.default_rng(0))
        assert x.shape == (1, 18)

    def test_invalid_sizes(self, tmp_path):
        c = sequential_corpus(tmp_path, 100)
        with pytest.raises(ConfigError):
            dt.sample_train_batch(c, 0, 4, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            dt.sample_train_batch(c, 4, 0, np.random.default_rng(0))


class TestEvalBatches:
    def test_enumerates_nonoverlapping_windows_and_drops_tail(self, tmp_path):
        c = sequential_corpus(tmp_path, 1000)  # eval segment: ids 990..999
        xs, ys = [], []
        for x, y in dt.eval_batches(c, seq_len=3, batch_size=2):
            assert x.shape[1] == 3
            xs.append(x)
            ys.append(y)
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        # (10 - 1) // 3 = 3 windows; ids 999 is a target only, id 990.. cover
        np.testing.assert_array_equal(x.reshape(-1), 990 + np.arange(9))
        np.testing.assert_array_equal(y, x + 1)

    def test_last_batch_may_be_short(self, tmp_path):
        c = sequential_corpus(tmp_path, 1000)
        sizes = [x.shape[0] for x, _ in dt.eval_batches(c, seq_len=3, batch_size=2)]
        assert sizes == [2, 1]

    def test_deterministic_across_calls(self, tmp_path):
        c = sequential_corpus(tmp_path, 3000)
        a = [x for x, _ in dt.eval_batches(c, 5, 3)]
        b = [x for x, _ in dt.eval_batches(c, 5, 3)]
        for xa, xb in zip(a, b):
            np.testing.assert_array_equal(xa, xb)
        assert len(a) == len(b)

    def test_too_short_eval_segment(self, tmp_path):
        c = sequential_corpus(tmp_path, 100)  # eval segment is 1 token
        with pytest.raises(ConfigError, match="too short"):
            next(dt.eval_batches(c, seq_len=4, batch_size=1))


class TestUnigramEntropy:
    def test_uniform_two_symbols(self, tmp_path):
        c = dt.ingest(write_bytes(tmp_path, b"abababab"))
        assert dt.unigram_entropy(c) == pytest.approx(math.log(2), rel=1e-12)

    def test_skewed_distribution(self, tmp_path):
        c = dt.ingest(write_bytes(tmp_path, b"aab"))
        want = -(2 / 3) * math.log(2 / 3) - (1 / 3) * math.log(1 / 3)
        assert dt.unigram_entropy(c) == pytest.approx(want, rel=1e-12)

    def test_constant_corpus_has_zero_entropy(self, tmp_path):
        c = dt.ingest(write_bytes(tmp_path, b"aaaa"))
        assert dt.unigram_entropy(c) == 0.0


class TestSynthesis:
    def test_deterministic_and_long_enough(self):
        a = dt.synthesize_text(5000, seed=3)
        b = dt.synthesize_text(5000, seed=3)
        assert a == b
        assert len(a) >= 5000
        assert a != dt.synthesize_text(5000, seed=4)

    def test_ascii_only(self):
        text = dt.synthesize_text(20000, seed=0)
        assert all(ord(ch) < 128 for ch in set(text))

    def test_write_corpus_digest_matches_file(self, tmp_path):
        p = tmp_path / "c.txt"
        digest = dt.write_corpus(p, 2000, seed=1)
        assert hashlib.sha256(p.read_bytes()).hexdigest() == digest

    def test_rejects_empty_request(self):
        with pytest.raises(ConfigError):
            dt.synthesize_text(0)
