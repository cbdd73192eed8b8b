"""Training loop: AdamW with decoupled weight decay, warmup plus cosine
decay, gradient accumulation to a fixed token budget, and binary
checkpoints that restore bit-identical training (parameters, optimizer
moments, and the batch sampler state all round-trip).
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data as dt
from . import numcore as nc
from .errors import ConfigError, IngestionError, NumericError
from .model import ModelConfig, TransformerState, loss_on_batch

CKPT_MAGIC = b"CARO"
CKPT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters. Defaults follow the reference recipe;
    the token budget per update is met by accumulating whole micro-batches
    of batch_size x seq_len tokens."""

    total_steps: int = 2000
    max_lr: float = 6e-4
    min_lr: float = 6e-5
    warmup_steps: int = 750
    batch_size: int = 16
    seq_len: int = 64
    tokens_per_update: int = 1024
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 500

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not (0.0 < self.max_lr):
            raise ConfigError(f"max_lr must be positive, got {self.max_lr}")
        if not (0.0 < self.min_lr <= self.max_lr):
            raise ConfigError(
                f"min_lr must be in (0, max_lr], got {self.min_lr} vs {self.max_lr}")
        if self.warmup_steps < 0 or self.warmup_steps >= self.total_steps:
            raise ConfigError(
                f"warmup_steps must be in [0, total_steps), got {self.warmup_steps}")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError(
                f"batch_size and seq_len must be >= 1, got {self.batch_size}, {self.seq_len}")
        if self.tokens_per_update < 1:
            raise ConfigError(f"tokens_per_update must be >= 1, got {self.tokens_per_update}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must be in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.grad_clip <= 0.0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.checkpoint_interval < 1:
            raise ConfigError(
                f"checkpoint_interval must be >= 1, got {self.checkpoint_interval}")

    @property
    def micro_batches_per_step(self) -> int:
        return max(1, math.ceil(self.tokens_per_update / (self.batch_size * self.seq_len)))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to max_lr over warmup_steps, then cosine decay to min_lr."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if step < cfg.warmup_steps:
        return cfg.max_lr * (step + 1) / cfg.warmup_steps
    if step >= cfg.total_steps:
        return cfg.min_lr
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = (step - cfg.warmup_steps) / span
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamState:
    """First and second moment accumulators plus the shared step counter."""

    def __init__(self, params: dict[str, nc.Tensor]) -> None:
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def decays(name: str, tensor: nc.Tensor) -> bool:
    """Weight decay applies to matrices only; biases, norm parameters, and
    the learnable position table are exempt."""
    return tensor.data.ndim >= 2 and name != "pos_emb"


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.square(g, dtype=np.float64).sum())
    return math.sqrt(total)


def adamw_step(params: dict[str, nc.Tensor], grads: dict[str, np.ndarray],
               state: AdamState, lr: float, cfg: TrainConfig) -> float:
    """Clip by global norm, then apply one decoupled-weight-decay Adam update
    in place. Returns the pre-clip gradient norm. Non-finite gradients abort
    before any parameter changes."""
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    norm = global_grad_norm(grads)
    scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif scale != 1.0:
            g = g * p.data.dtype.type(scale)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay > 0.0 and decays(name, p):
            update = update + cfg.weight_decay * p.data
        p.data -= p.data.dtype.type(lr) * update
    return norm


def trace_line(step: int, loss: float, lr: float, toks_per_sec: float) -> str:
    return f"step={step} loss={loss:.6f} lr={lr:.8f} toks_per_sec={toks_per_sec:.1f}"


def train(state: TransformerState, corpus: dt.Corpus, cfg: TrainConfig,
          out_dir=None, sink=None, start_step: int = 0,
          opt_state: AdamState | None = None,
          rng: np.random.Generator | None = None,
          meta: dict | None = None) -> list[str]:
    """Run steps [start_step, total_steps) and return the loss trace lines.

    Passing opt_state and rng restored from a checkpoint continues an
    interrupted run with losses identical to the uninterrupted one. When
    out_dir is set, periodic and final checkpoints land there and the trace
    is appended to trace.log. A non-finite loss or gradient raises
    NumericError; checkpoints already written stay on disk.
    """
    if opt_state is None:
        opt_state = AdamState(state.params)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trace: list[str] = []
    written = 0
    n_micro = cfg.micro_batches_per_step
    tokens_per_step = n_micro * cfg.batch_size * cfg.seq_len

    def flush() -> None:
        nonlocal written
        if out is not None and written < len(trace):
            with open(out / "trace.log", "a", encoding="utf-8") as fh:
                fh.write("\n".join(trace[written:]) + "\n")
            written = len(trace)

    names = list(state.params)
    tensors = [state.params[n] for n in names]
    try:
        for step in range(start_step, cfg.total_steps):
            t0 = time.perf_counter()
            lr = lr_at(step, cfg)
            sums: dict[str, np.ndarray] | None = None
            loss_sum = 0.0
            for _ in range(n_micro):
                inputs, targets = dt.sample_train_batch(
                    corpus, cfg.seq_len, cfg.batch_size, rng)
                with nc.Tape() as tape:
                    loss = loss_on_batch(state, inputs, targets)
                grads = nc.backward(loss, tape)
                loss_sum += loss.item()
                if sums is None:
                    sums = {n: grads[t] for n, t in zip(names, tensors) if t in grads}
                else:
                    for n, t in zip(names, tensors):
                        if t in grads:
                            sums[n] += grads[t]
            assert sums is not None
            if n_micro > 1:
                inv = 1.0 / n_micro
                for n in sums:
                    sums[n] *= sums[n].dtype.type(inv)
            loss_val = loss_sum / n_micro
            if not math.isfinite(loss_val):
                raise NumericError(f"non-finite loss {loss_val} at step {step}")
            adamw_step(state.params, sums, opt_state, lr, cfg)
            dt_step = time.perf_counter() - t0
            tps = tokens_per_step / dt_step if dt_step > 0 else 0.0
            line = trace_line(step, loss_val, lr, tps)
            trace.append(line)
            if sink is not None:
                sink(line)
            done = step + 1
            if out is not None and (done % cfg.checkpoint_interval == 0
                                    or done == cfg.total_steps):
                flush()
                name = "model-final.ckpt" if done == cfg.total_steps \
                    else f"model-step{done:06d}.ckpt"
                save_checkpoint(out / name, state, cfg, done, rng, opt_state, meta=meta)
    finally:
        flush()
    return trace


# --- checkpoint format ---


def _tensor_block(name: str, arr: np.ndarray) -> bytes:
    nm = name.encode("utf-8")
    tag = _DTYPE_TAGS[arr.dtype]
    head = struct.pack("<H", len(nm)) + nm + struct.pack("<BB", tag, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    return head + dims + payload


def save_checkpoint(path, state: TransformerState, cfg: TrainConfig, step: int,
                    rng: np.random.Generator, opt_state: AdamState,
                    meta: dict | None = None) -> None:
    """Write model config, training config, step, sampler state, parameters,
    and optimizer moments as one self-describing binary file."""
    header = {
        "format_version": CKPT_VERSION,
        "model": asdict(state.config),
        "dtype": state.dtype.name,
        "train": asdict(cfg),
        "step": int(step),
        "rng_state": rng.bit_generator.state,
        "adam_t": int(opt_state.t),
        "meta": meta or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    blocks = []
    n = 0
    for name, t in state.params.items():
        blocks.append(_tensor_block(name, t.data))
        n += 1
    for name in state.params:
        blocks.append(_tensor_block(f"adam.m.{name}", opt_state.m[name]))
        blocks.append(_tensor_block(f"adam.v.{name}", opt_state.v[name]))
        n += 2
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(struct.pack("<I", n))
        fh.write(b"".join(blocks))


class _Reader:
    def __init__(self, buf: bytes, path: str) -> None:
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise IngestionError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.off: self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    """Read a checkpoint; returns (state, train_config, step, rng, opt_state, meta)."""
    p = Path(path)
    if not p.is_file():
        raise IngestionError(f"checkpoint not found: {p}")
    r = _Reader(p.read_bytes(), str(p))
    if r.take(4) != CKPT_MAGIC:
        raise IngestionError(f"{p}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise IngestionError(
            f"{p}: checkpoint format version {version}, this build reads {CKPT_VERSION}")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    n_tensors = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        tag, ndim = struct.unpack("<BB", r.take(2))
        if tag not in _TAG_DTYPES:
            raise IngestionError(f"{p}: unknown dtype tag {tag} for tensor {name!r}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        dtype = _TAG_DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(r.take(count * dtype.itemsize),
                            dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        tensors[name] = arr
    model_cfg = ModelConfig(**header["model"])
    train_cfg = TrainConfig(**header["train"])
    state = TransformerState(model_cfg, dtype=header["dtype"])
    opt_state = AdamState(state.params)
    opt_state.t = int(header["adam_t"])
    for name, t in state.params.items():
        if name not in tensors:
            raise IngestionError(f"{p}: checkpoint is missing parameter {name!r}")
        if tensors[name].shape != t.data.shape:
            raise IngestionError(
                f"{p}: parameter {name!r} has shape {tensors[name].shape}, "
                f"expected {t.data.shape}")
        t.data[...] = tensors[name]
        opt_state.m[name][...] = tensors[f"adam.m.{name}"]
        opt_state.v[name][...] = tensors[f"adam.v.{name}"]
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return state, train_cfg, int(header["step"]), rng, opt_state, header.get("meta", {})
