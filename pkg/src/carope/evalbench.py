"""Evaluation and measurement harnesses: held-out perplexity, the
length-extrapolation grid, a training-step throughput benchmark, and a
finite-difference gradient check for a whole tiny model.

Every harness reports through MetricsRecord so the CLI can render and emit
results uniformly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as dt
from . import numcore as nc
from . import posenc as pe
from .errors import CaropeError, ContractError, GradCheckError, PositionRangeError
from .model import ModelConfig, TransformerState, forward, loss_on_batch
from .train import TrainConfig, AdamState, adamw_step

UNSUPPORTED = float("nan")


@dataclass
class MetricsRecord:
    """One measured value plus enough context to reproduce it."""

    encoding: str
    seq_len: int
    metric: str
    value: float
    n_tokens: int
    wall_seconds: float
    note: str = ""

    def emit_line(self) -> str:
        return (f"encoding={self.encoding} seq_len={self.seq_len} metric={self.metric} "
                f"value={self.value:.6f} n_tokens={self.n_tokens} wall_s={self.wall_seconds:.3f}")


def perplexity(state: TransformerState, corpus: dt.Corpus, seq_len: int,
               batch_size: int = 32) -> MetricsRecord:
    """exp of the token-weighted mean next-token loss over the evaluation
    segment, walked in non-overlapping windows without recording gradients."""
    t0 = time.perf_counter()
    nat_sum = 0.0
    n_tokens = 0
    for inputs, targets in dt.eval_batches(corpus, seq_len, batch_size):
        loss = loss_on_batch(state, inputs, targets)
        n = targets.size
        nat_sum += loss.item() * n
        n_tokens += n
    mean_nats = nat_sum / n_tokens
    return MetricsRecord(
        encoding=state.config.encoding, seq_len=seq_len, metric="ppl",
        value=float(math.exp(mean_nats)), n_tokens=n_tokens,
        wall_seconds=time.perf_counter() - t0)


def extrapolation_report(states: dict[str, TransformerState], corpus: dt.Corpus,
                         lengths: list[int], batch_size: int = 32,
                         ) -> tuple[list[MetricsRecord], str]:
    """Score every (encoding, length) cell; a failing cell is recorded with a
    note instead of aborting the others. Returns the records and an aligned
    text table with one row per length."""
    if not lengths:
        raise ContractError("extrapolation_report: need at least one length")
    encodings = list(states)
    records: list[MetricsRecord] = []
    cells: dict[tuple[str, int], str] = {}
    for enc in encodings:
        for seq_len in lengths:
            try:
                rec = perplexity(states[enc], corpus, seq_len, batch_size)
                cells[(enc, seq_len)] = f"{rec.value:.2f}"
            except PositionRangeError as e:
                rec = MetricsRecord(encoding=enc, seq_len=seq_len, metric="ppl",
                                    value=UNSUPPORTED, n_tokens=0, wall_seconds=0.0,
                                    note=f"unsupported: {e}")
                cells[(enc, seq_len)] = "-"
            except CaropeError as e:
                rec = MetricsRecord(encoding=enc, seq_len=seq_len, metric="ppl",
                                    value=UNSUPPORTED, n_tokens=0, wall_seconds=0.0,
                                    note=f"error: {e}")
                cells[(enc, seq_len)] = "err"
            records.append(rec)
    widths = {enc: max(len(enc), *(len(cells[(enc, s)]) for s in lengths))
              for enc in encodings}
    len_w = max(len("seq_len"), *(len(str(s)) for s in lengths))
    lines = ["  ".join(["seq_len".rjust(len_w)] + [e.rjust(widths[e]) for e in encodings])]
    for s in lengths:
        lines.append("  ".join([str(s).rjust(len_w)]
                               + [cells[(e, s)].rjust(widths[e]) for e in encodings]))
    return records, "\n".join(lines)


def throughput_bench(config: ModelConfig, train_config: TrainConfig | None = None,
                     n_warmup: int = 5, n_timed: int = 9, seed: int = 0) -> MetricsRecord:
    """Median tokens/second over full optimization steps (forward, backward,
    optimizer update) on synthetic batches."""
    if n_timed < 3:
        raise ContractError(f"n_timed must be >= 3 for a stable median, got {n_timed}")
    if n_warmup < 0:
        raise ContractError(f"n_warmup must be >= 0, got {n_warmup}")
    tcfg = train_config if train_config is not None else TrainConfig()
    state = TransformerState(config)
    opt = AdamState(state.params)
    rng = np.random.default_rng(seed)
    names = list(state.params)
    tensors = [state.params[n] for n in names]
    tokens_per_step = tcfg.batch_size * tcfg.seq_len

    def one_step(step: int) -> float:
        inputs = rng.integers(0, config.vocab_size, size=(tcfg.batch_size, tcfg.seq_len))
        targets = rng.integers(0, config.vocab_size, size=(tcfg.batch_size, tcfg.seq_len))
        t0 = time.perf_counter()
        with nc.Tape() as tape:
            loss = loss_on_batch(state, inputs, targets)
        grads = nc.backward(loss, tape)
        named = {n: grads[t] for n, t in zip(names, tensors) if t in grads}
        adamw_step(state.params, named, opt, 1e-4, tcfg)
        return time.perf_counter() - t0

    t_start = time.perf_counter()
    for i in range(n_warmup):
        one_step(i)
    times = [one_step(n_warmup + i) for i in range(n_timed)]
    median_dt = float(np.median(times))
    return MetricsRecord(
        encoding=config.encoding, seq_len=tcfg.seq_len, metric="toks_per_sec",
        value=tokens_per_step / median_dt, n_tokens=n_timed * tokens_per_step,
        wall_seconds=time.perf_counter() - t_start)


def bench_compare(config: ModelConfig, train_config: TrainConfig | None = None,
                  n_warmup: int = 5, n_timed: int = 9, seed: int = 0,
                  ) -> tuple[MetricsRecord, MetricsRecord, float]:
    """Benchmark rope and carope variants of one architecture; returns both
    records plus the carope/rope ratio of median step times."""
    base = {k: getattr(config, k) for k in
            ("n_layers", "n_heads", "d_model", "vocab_size", "max_context",
             "tie_embeddings", "seed")}
    rec_rope = throughput_bench(ModelConfig(encoding=pe.ROPE, **base),
                                train_config, n_warmup, n_timed, seed)
    rec_carope = throughput_bench(ModelConfig(encoding=pe.CAROPE, **base),
                                  train_config, n_warmup, n_timed, seed)
    ratio = rec_rope.value / rec_carope.value  # step-time ratio, carope over rope
    return rec_rope, rec_carope, ratio


# --- finite-difference gradient check ---


@dataclass
class GradCheckReport:
    """Per-parameter-group relative errors between analytic and central
    finite-difference gradients."""

    tolerance: float
    step_size: float
    groups: dict[str, float] = field(default_factory=dict)
    passed: bool = True

    def format(self) -> str:
        lines = []
        for name, err in self.groups.items():
            flag = "ok" if err <= self.tolerance else "FAIL"
            lines.append(f"{name:<16} rel_err={err:.3e} {flag}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'} "
                     f"(tolerance {self.tolerance:g}, step {self.step_size:g})")
        return "\n".join(lines)


def _randomize_for_check(state: TransformerState, seed: int) -> None:
    # The rotary-matching init is a degenerate point (w == 0 suppresses the
    # frequency path), so the check perturbs every group to a generic one.
    rng = np.random.default_rng(seed)
    for name, t in state.params.items():
        shape = t.data.shape
        if name.endswith(("ln1.g", "ln2.g", "ln_f.g")):
            vals = 1.0 + rng.normal(0.0, 0.2, size=shape)
        elif name == "tok_emb":
            vals = rng.normal(0.0, 0.8, size=shape)
        elif name == "carope.b":
            vals = rng.normal(0.5, 0.5, size=shape)
        elif t.data.ndim >= 2:
            vals = rng.normal(0.0, 0.3, size=shape)
        else:
            vals = rng.normal(0.0, 0.2, size=shape)
        t.data[...] = vals.astype(t.data.dtype)


def grad_check(config: ModelConfig, tolerance: float = 1e-6, step_size: float = 1e-6,
               seed: int = 0, batch_size: int = 2, seq_len: int = 6,
               max_params: int = 10000) -> GradCheckReport:
    """Compare analytic gradients of the mean training loss against central
    finite differences, entry by entry, in float64.

    Parameters are first re-randomized away from the training init so every
    path (including the frequency head of the context-aware encoding)
    carries a measurable gradient. The per-group score is the largest
    absolute disagreement divided by the largest gradient magnitude seen in
    that group, with disagreements below the differencing noise floor
    treated as agreement on zero. Exhaustive differencing is O(parameters)
    forward passes, so the model must stay tiny."""
    state = TransformerState(config, dtype=np.float64)
    n = state.n_params()
    if n > max_params:
        raise ContractError(
            f"grad_check needs a tiny model (<= {max_params} parameters), got {n}")
    _randomize_for_check(state, seed)
    rng = np.random.default_rng(seed + 1)
    tokens = rng.integers(0, config.vocab_size, size=(batch_size, seq_len))
    targets = rng.integers(0, config.vocab_size, size=(batch_size, seq_len))

    with nc.Tape() as tape:
        loss = loss_on_batch(state, tokens, targets)
    grads = nc.backward(loss, tape)

    def loss_value() -> float:
        return loss_on_batch(state, tokens, targets).item()

    # Central differencing cannot resolve derivatives below the rounding
    # error of the loss divided by the step. Entries where analytic and
    # differenced values both sit under that floor are compared as exact
    # zeros; a true zero otherwise scores as noise/noise. The canonical
    # case is a key bias under a position-independent encoding: softmax
    # shift invariance makes its gradient identically zero.
    noise_floor = (64.0 * np.finfo(np.float64).eps
                   * max(1.0, abs(loss.item())) / step_size)

    report = GradCheckReport(tolerance=tolerance, step_size=step_size)
    for name, t in state.params.items():
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        fd = np.zeros_like(t.data)
        flat_p = t.data.reshape(-1)
        flat_fd = fd.reshape(-1)
        for i in range(flat_p.shape[0]):
            orig = flat_p[i]
            flat_p[i] = orig + step_size
            lp = loss_value()
            flat_p[i] = orig - step_size
            lm = loss_value()
            flat_p[i] = orig
            flat_fd[i] = (lp - lm) / (2.0 * step_size)
        diff = np.abs(analytic - fd)
        diff[np.maximum(np.abs(analytic), np.abs(fd)) <= noise_floor] = 0.0
        denom = max(float(np.abs(analytic).max()), float(np.abs(fd).max()), 1e-12)
        rel = float(diff.max()) / denom
        report.groups[name] = rel
        if rel > tolerance:
            report.passed = False
    return report


def require_pass(report: GradCheckReport) -> None:
    if not report.passed:
        bad = {k: v for k, v in report.groups.items() if v > report.tolerance}
        raise GradCheckError(f"gradient check failed for groups: {bad}")
