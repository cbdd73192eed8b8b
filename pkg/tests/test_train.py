"""Optimizer, schedule, training-loop, and checkpoint tests."""

import math
import re

import numpy as np
import pytest

from carope import data as dt
from carope import model as md
from carope import numcore as nc
from carope import train as tr
from carope.errors import ConfigError, IngestionError, NumericError


def tiny_model_config(**overrides):
    kwargs = dict(n_layers=1, n_heads=2, d_model=16, vocab_size=256,
                  max_context=32, encoding="carope", seed=0)
    kwargs.update(overrides)
    return md.ModelConfig(**kwargs)


def tiny_train_config(**overrides):
    kwargs = dict(total_steps=6, max_lr=1e-3, min_lr=1e-4, warmup_steps=2,
                  batch_size=4, seq_len=16, tokens_per_update=64,
                  checkpoint_interval=3, seed=0)
    kwargs.update(overrides)
    return tr.TrainConfig(**kwargs)


class TestTrainConfig:
    @pytest.mark.parametrize("overrides", [
        dict(total_steps=0), dict(max_lr=0.0), dict(min_lr=0.0),
        dict(min_lr=2e-3),                   # above max_lr
        dict(warmup_steps=-1), dict(warmup_steps=6),  # not below total_steps
        dict(batch_size=0), dict(seq_len=0), dict(tokens_per_update=0),
        dict(beta1=1.0), dict(beta2=-0.1), dict(eps=0.0),
        dict(weight_decay=-0.1), dict(grad_clip=0.0), dict(checkpoint_interval=0),
    ])
    def test_rejects_bad_values(self, overrides):
        with pytest.raises(ConfigError):
            tiny_train_config(**overrides)

    def test_micro_batch_count_rounds_up(self):
        assert tiny_train_config(tokens_per_update=64).micro_batches_per_step == 1
        assert tiny_train_config(tokens_per_update=65).micro_batches_per_step == 2
        assert tiny_train_config(tokens_per_update=128).micro_batches_per_step == 2
        assert tiny_train_config(tokens_per_update=1).micro_batches_per_step == 1


class TestSchedule:
    def cfg(self):
        return tr.TrainConfig(total_steps=2000, max_lr=6e-4, min_lr=6e-5,
                              warmup_steps=750)

    def test_linear_warmup(self):
        cfg = self.cfg()
        assert tr.lr_at(0, cfg) == pytest.approx(6e-4 / 750, rel=1e-12)
        assert tr.lr_at(374, cfg) == pytest.approx(6e-4 * 375 / 750, rel=1e-12)
        assert tr.lr_at(749, cfg) == pytest.approx(6e-4, rel=1e-12)

    def test_cosine_starts_at_max_and_ends_at_min(self):
        cfg = self.cfg()
        assert tr.lr_at(750, cfg) == pytest.approx(6e-4, rel=1e-12)
        assert tr.lr_at(2000, cfg) == 6e-5
        assert tr.lr_at(5000, cfg) == 6e-5

    def test_cosine_midpoint_is_mean_of_extremes(self):
        cfg = self.cfg()
        mid = 750 + (2000 - 750) // 2
        assert tr.lr_at(mid, cfg) == pytest.approx((6e-4 + 6e-5) / 2, rel=1e-12)
        assert tr.lr_at(mid, cfg) == pytest.approx(3.3e-4, rel=1e-12)

    def test_monotone_decay_after_warmup(self):
        cfg = self.cfg()
        values = [tr.lr_at(s, cfg) for s in range(750, 2000, 50)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_negative_step_rejected(self):
        with pytest.raises(ConfigError):
            tr.lr_at(-1, self.cfg())


class TestDecayPolicy:
    def test_matrices_decay_vectors_do_not(self):
        w = nc.Tensor(np.zeros((4, 4)))
        b = nc.Tensor(np.zeros(4))
        assert tr.decays("attn.wq", w)
        assert not tr.decays("attn.bq", b)
        assert not tr.decays("ln1.g", b)

    def test_position_table_is_exempt_despite_rank(self):
        t = nc.Tensor(np.zeros((8, 4)))
        assert not tr.decays("pos_emb", t)
        assert tr.decays("tok_emb", t)


def one_param(value=1.0, shape=(1, 1)):
    return {"w": nc.Tensor(np.full(shape, value), dtype=np.float64,
                           requires_grad=True)}


class TestAdamW:
    def test_first_step_hand_example_without_decay(self):
        # m-hat and v-hat are exactly g on step 1, so the update is
        # g / (|g| + eps) = ~1 and the parameter moves by lr.
        params = one_param(1.0)
        state = tr.AdamState(params)
        cfg = tiny_train_config(weight_decay=0.0, grad_clip=10.0)
        norm = tr.adamw_step(params, {"w": np.ones((1, 1))}, state, 0.1, cfg)
        assert norm == pytest.approx(1.0)
        assert params["w"].data[0, 0] == pytest.approx(0.9, abs=1e-8)
        assert state.t == 1

    def test_first_step_hand_example_with_decay(self):
        params = one_param(1.0)
        state = tr.AdamState(params)
        cfg = tiny_train_config(weight_decay=0.1, grad_clip=10.0)
        tr.adamw_step(params, {"w": np.ones((1, 1))}, state, 0.1, cfg)
        # decoupled decay subtracts lr * wd * w on top of the Adam move
        assert params["w"].data[0, 0] == pytest.approx(0.89, abs=1e-8)

    def test_clipping_rescales_to_unit_norm(self):
        cfg = tiny_train_config(weight_decay=0.0, grad_clip=1.0)
        a = one_param(1.0)
        sa = tr.AdamState(a)
        norm = tr.adamw_step(a, {"w": np.full((1, 1), 2.0)}, sa, 0.1, cfg)
        assert norm == pytest.approx(2.0)  # reported norm is pre-clip
        b = one_param(1.0)
        sb = tr.AdamState(b)
        tr.adamw_step(b, {"w": np.full((1, 1), 1.0)}, sb, 0.1, cfg)
        # after rescaling, a sees the same gradient as b
        np.testing.assert_allclose(a["w"].data, b["w"].data, rtol=1e-12)

    def test_zero_gradient_leaves_parameter_unchanged(self):
        params = one_param(0.7)
        state = tr.AdamState(params)
        cfg = tiny_train_config(weight_decay=0.0)
        tr.adamw_step(params, {"w": np.zeros((1, 1))}, state, 0.1, cfg)
        assert params["w"].data[0, 0] == 0.7

    def test_missing_gradient_treated_as_zero(self):
        params = {**one_param(0.3), "other": nc.Tensor(np.full((2, 2), 1.5),
                                                       dtype=np.float64,
                                                       requires_grad=True)}
        state = tr.AdamState(params)
        cfg = tiny_train_config(weight_decay=0.0)
        tr.adamw_step(params, {"w": np.ones((1, 1))}, state, 0.1, cfg)
        assert np.all(params["other"].data == 1.5)

    def test_nonfinite_gradient_names_the_parameter(self):
        params = one_param(1.0)
        state = tr.AdamState(params)
        bad = np.full((1, 1), np.nan)
        with pytest.raises(NumericError, match="'w'"):
            tr.adamw_step(params, {"w": bad}, state, 0.1, tiny_train_config())
        assert params["w"].data[0, 0] == 1.0  # aborted before any update


class TestTraceFormat:
    def test_line_shape(self):
        line = tr.trace_line(12, 3.25, 0.0006, 15000.0)
        assert line == "step=12 loss=3.250000 lr=0.00060000 toks_per_sec=15000.0"
        assert re.fullmatch(
            r"step=\d+ loss=-?\d+\.\d{6} lr=\d+\.\d{8} toks_per_sec=\d+\.\d", line)


class TestTrainingLoop:
    def test_loss_decreases_on_short_run(self, corpus):
        state = md.TransformerState(tiny_model_config())
        cfg = tiny_train_config(total_steps=30, warmup_steps=5,
                                checkpoint_interval=100)
        trace = tr.train(state, corpus, cfg)
        losses = [float(l.split()[1].split("=")[1]) for l in trace]
        assert len(losses) == 30
        assert np.mean(losses[-5:]) < np.mean(losses[:5]) - 0.3

    def test_same_seed_reproduces_loss_sequence(self, corpus):
        def run():
            state = md.TransformerState(tiny_model_config())
            return tr.train(state, corpus, tiny_train_config())

        a, b = run(), run()
        # wall-clock throughput differs; everything else must match
        strip = lambda lines: [l.rsplit(" ", 1)[0] for l in lines]
        assert strip(a) == strip(b)

    def test_gradient_accumulation_matches_manual_average(self, corpus):
        cfg = tiny_train_config(total_steps=1, warmup_steps=0,
                                tokens_per_update=128, weight_decay=0.0)
        assert cfg.micro_batches_per_step == 2
        auto = md.TransformerState(tiny_model_config())
        tr.train(auto, corpus, cfg)

        manual = md.TransformerState(tiny_model_config())
        rng = np.random.default_rng(cfg.seed)
        opt = tr.AdamState(manual.params)
        sums = None
        for _ in range(2):
            x, y = dt.sample_train_batch(corpus, cfg.seq_len, cfg.batch_size, rng)
            with nc.Tape() as tape:
                loss = md.loss_on_batch(manual, x, y)
            grads = nc.backward(loss, tape)
            named = {n: grads[t] for n, t in manual.params.items()}
            if sums is None:
                sums = named
            else:
                for n in sums:
                    sums[n] += named[n]
        for n in sums:
            sums[n] *= sums[n].dtype.type(0.5)
        tr.adamw_step(manual.params, sums, opt, tr.lr_at(0, cfg), cfg)
        for name in auto.params:
            np.testing.assert_array_equal(auto.params[name].data,
                                          manual.params[name].data, err_msg=name)

    def test_nonfinite_loss_aborts_but_keeps_artifacts(self, corpus, tmp_path):
        # rope, not carope: the context-aware path rejects poisoned inputs
        # earlier with its own frequency-range contract error
        state = md.TransformerState(tiny_model_config(encoding="rope"))
        cfg = tiny_train_config(total_steps=6, checkpoint_interval=2)

        def poison(line):
            if line.startswith("step=2 "):
                state.params["tok_emb"].data[:] = np.nan

        with pytest.raises(NumericError, match="non-finite"):
            tr.train(state, corpus, cfg, out_dir=tmp_path, sink=poison)
        assert (tmp_path / "model-step000002.ckpt").is_file()
        lines = (tmp_path / "trace.log").read_text().strip().splitlines()
        assert [l.split()[0] for l in lines] == ["step=0", "step=1", "step=2"]

    def test_trace_file_matches_return_value(self, corpus, tmp_path):
        state = md.TransformerState(tiny_model_config())
        trace = tr.train(state, corpus, tiny_train_config(), out_dir=tmp_path)
        on_disk = (tmp_path / "trace.log").read_text().strip().splitlines()
        assert on_disk == trace
        assert (tmp_path / "model-step000003.ckpt").is_file()
        assert (tmp_path / "model-final.ckpt").is_file()

    def test_sink_sees_every_line(self, corpus):
        seen = []
        state = md.TransformerState(tiny_model_config())
        trace = tr.train(state, corpus, tiny_train_config(), sink=seen.append)
        assert seen == trace


class TestCheckpoints:
    def train_briefly(self, corpus, tmp_path, **cfg_overrides):
        state = md.TransformerState(tiny_model_config())
        cfg = tiny_train_config(**cfg_overrides)
        tr.train(state, corpus, cfg, out_dir=tmp_path, meta={"note": "abc"})
        return state, cfg, tmp_path / "model-final.ckpt"

    def test_roundtrip_restores_everything(self, corpus, tmp_path):
        state, cfg, path = self.train_briefly(corpus, tmp_path)
        loaded, cfg2, step, rng, opt, meta = tr.load_checkpoint(path)
        assert cfg2 == cfg
        assert step == cfg.total_steps
        assert meta == {"note": "abc"}
        assert loaded.config == state.config
        for name in state.params:
            np.testing.assert_array_equal(loaded.params[name].data,
                                          state.params[name].data, err_msg=name)
        assert set(opt.m) == set(state.params)
        assert opt.t == cfg.total_steps
        assert any(np.any(v != 0) for v in opt.v.values())
        assert isinstance(rng, np.random.Generator)

    def test_resaving_is_byte_identical(self, corpus, tmp_path):
        _, _, path = self.train_briefly(corpus, tmp_path)
        loaded, cfg2, step, rng, opt, meta = tr.load_checkpoint(path)
        again = tmp_path / "again.ckpt"
        tr.save_checkpoint(again, loaded, cfg2, step, rng, opt, meta=meta)
        assert again.read_bytes() == path.read_bytes()

    def test_resume_matches_uninterrupted_run(self, corpus, tmp_path):
        full_state = md.TransformerState(tiny_model_config())
        cfg = tiny_train_config(total_steps=8, checkpoint_interval=4)
        full_trace = tr.train(full_state, corpus, cfg, out_dir=tmp_path / "full")

        state, cfg2, step, rng, opt, _ = tr.load_checkpoint(
            tmp_path / "full" / "model-step000004.ckpt")
        resumed = tr.train(state, corpus, cfg2, start_step=step,
                           opt_state=opt, rng=rng)
        losses = lambda lines: [l.split()[1] for l in lines]
        assert losses(resumed) == losses(full_trace[4:])
        for name in full_state.params:
            np.testing.assert_array_equal(state.params[name].data,
                                          full_state.params[name].data,
                                          err_msg=name)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError, match="not found"):
            tr.load_checkpoint(tmp_path / "nope.ckpt")

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"JUNKxxxxxxxxxxxxxxxx")
        with pytest.raises(IngestionError, match="bad magic"):
            tr.load_checkpoint(p)

    def test_version_mismatch_names_both_versions(self, tmp_path):
        import struct
        p = tmp_path / "future.ckpt"
        p.write_bytes(tr.CKPT_MAGIC + struct.pack("<I", 99) + b"\0" * 16)
        with pytest.raises(IngestionError, match=r"version 99.*reads 1"):
            tr.load_checkpoint(p)

    def test_truncated_file(self, corpus, tmp_path):
        _, _, path = self.train_briefly(corpus, tmp_path)
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(path.read_bytes()[: path.stat().st_size // 2])
        with pytest.raises(IngestionError, match="truncated"):
            tr.load_checkpoint(clipped)
