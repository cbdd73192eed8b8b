"""Position encodings: sinusoidal and learnable tables, plus rotary phases.

The rotary family rotates adjacent (even, odd) feature pairs of queries and
keys before the attention dot product. Classic rotary uses fixed per-pair
angular speeds theta_i = base**(-2*i/d_head) so pair i at position m gets
phase m * theta_i. The context-aware variant instead derives a per-head base
frequency f in (0, 1) from each token's input embedding and gives pair i at
position m the phase sum over preceding tokens of f_t**i; a constant
f == theta_1 collapses it to classic rotary because theta_i == theta_1**i.

All frequency and phase tensors are float64 end to end, whatever the model
dtype: phases grow linearly with position, and float32 phase error at long
range is the same size as the equivalences tests must resolve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractError, DimensionError, PositionRangeError

SINUSOIDAL = "sinusoidal"
LEARNABLE = "learnable"
ROPE = "rope"
CAROPE = "carope"
ENCODINGS = (SINUSOIDAL, LEARNABLE, ROPE, CAROPE)
ROTARY_ENCODINGS = (ROPE, CAROPE)
APE_ENCODINGS = (SINUSOIDAL, LEARNABLE)

# Clip window for the raw frequency logits. The lower bound keeps
# softplus(z) above ~9.4e-14 so f stays strictly below 1 even in float64;
# the upper bound scales with d_head and keeps f strictly positive.
FREQ_LOGIT_MIN = -30.0


@dataclass(frozen=True)
class RotaryConfig:
    """Geometry of the rotary phase computation for one attention stack."""

    d_head: int
    n_heads: int
    base: float = 10000.0

    def __post_init__(self) -> None:
        if self.d_head < 2 or self.d_head % 2 != 0:
            raise ContractError(f"d_head must be a positive even integer, got {self.d_head}")
        if self.n_heads < 1:
            raise ContractError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.base <= 1.0:
            raise ContractError(f"base must exceed 1, got {self.base}")

    @property
    def n_pairs(self) -> int:
        return self.d_head // 2

    @property
    def freq_logit_max(self) -> float:
        return 30.0 * self.d_head


@dataclass
class FreqTensor:
    """Per-token base frequencies, shape [batch, n_heads, seq_len], float64,
    every value strictly inside (0, 1)."""

    values: nc.Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise DimensionError(f"FreqTensor needs [batch, heads, seq], got {self.values.shape}")
        if self.values.dtype != np.float64:
            raise ContractError(f"FreqTensor must be float64, got {self.values.dtype}")


@dataclass
class PhaseTensor:
    """Rotation angles in radians, shape [batch, n_heads, seq_len, n_pairs],
    float64. Batch and head dims may be 1 to broadcast (position-only phases)."""

    values: nc.Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 4:
            raise DimensionError(
                f"PhaseTensor needs [batch, heads, seq, pairs], got {self.values.shape}")
        if self.values.dtype != np.float64:
            raise ContractError(f"PhaseTensor must be float64, got {self.values.dtype}")


@dataclass
class CaropeParams:
    """Trainable frequency head: w [d_model, n_heads] and per-head bias b."""

    w: nc.Tensor
    b: nc.Tensor

    def __post_init__(self) -> None:
        if self.w.ndim != 2 or self.b.ndim != 1 or self.w.shape[1] != self.b.shape[0]:
            raise DimensionError(
                f"CaropeParams: w {self.w.shape} and b {self.b.shape} must be "
                "[d_model, n_heads] and [n_heads]")


@dataclass
class ApeTable:
    """Additive position table, shape [max_positions, d_model]. The sinusoidal
    kind is a pure function of position (rebuilt on demand for longer inputs,
    never trained); the learnable kind is a fixed-size trainable parameter."""

    table: nc.Tensor
    kind: str
    max_positions: int = field(init=False)

    def __post_init__(self) -> None:
        if self.kind not in APE_ENCODINGS:
            raise ContractError(f"ApeTable kind must be one of {APE_ENCODINGS}, got {self.kind!r}")
        if self.table.ndim != 2:
            raise DimensionError(f"ApeTable needs [positions, d_model], got {self.table.shape}")
        self.max_positions = self.table.shape[0]


# --- classic rotary ---


def rope_theta(i: int, cfg: RotaryConfig) -> float:
    """Angular speed of pair i (1-based): base**(-2*i/d_head)."""
    if not (1 <= i <= cfg.n_pairs):
        raise ContractError(f"pair index must be in [1, {cfg.n_pairs}], got {i}")
    return float(cfg.base ** (-2.0 * i / cfg.d_head))


def rope_phases(seq_len: int, cfg: RotaryConfig) -> PhaseTensor:
    """Position-only phases m * theta_i, shape [1, 1, seq_len, n_pairs]."""
    if seq_len < 1:
        raise ContractError(f"seq_len must be >= 1, got {seq_len}")
    pos = np.arange(seq_len, dtype=np.float64)
    theta = np.array([rope_theta(i, cfg) for i in range(1, cfg.n_pairs + 1)], dtype=np.float64)
    vals = np.outer(pos, theta).reshape(1, 1, seq_len, cfg.n_pairs)
    return PhaseTensor(nc.Tensor(vals, dtype=np.float64))


# --- context-aware rotary ---


def carope_init_rope(cfg: RotaryConfig, d_model: int, dtype=np.float32) -> CaropeParams:
    """Parameters that reproduce classic rotary exactly at initialization.

    w is zero so every token maps to the same frequency; b solves
    1/(softplus(b) + 1) == theta_1, i.e. b = log(expm1(1/theta_1 - 1)),
    computed as y + log1p(-exp(-y)) with y = 1/theta_1 - 1 so huge y (small
    theta_1) does not overflow.
    """
    if d_model < 1:
        raise ContractError(f"d_model must be >= 1, got {d_model}")
    y = 1.0 / rope_theta(1, cfg) - 1.0
    if y <= 0:
        raise ContractError(f"theta_1 must be < 1 for the rotary-matching init, got 1/{1 + y}")
    b_val = y + math.log1p(-math.exp(-y))
    w = nc.Tensor(np.zeros((d_model, cfg.n_heads)), dtype=dtype, requires_grad=True)
    b = nc.Tensor(np.full(cfg.n_heads, b_val), dtype=dtype, requires_grad=True)
    return CaropeParams(w=w, b=b)


def carope_base_freq(x: nc.Tensor, params: CaropeParams, cfg: RotaryConfig) -> FreqTensor:
    """Map input embeddings [batch, seq, d_model] to per-token frequencies.

    f = 1 / (softplus(x @ w + b) + 1), clipped logits, so f is strictly
    inside (0, 1) for any finite input. Differentiable into x, w, and b.
    """
    if x.ndim != 3:
        raise DimensionError(f"carope_base_freq: x must be [batch, seq, d_model], got {x.shape}")
    if x.shape[-1] != params.w.shape[0]:
        raise DimensionError(
            f"carope_base_freq: x feature dim {x.shape[-1]} != w rows {params.w.shape[0]}")
    if params.w.shape[1] != cfg.n_heads:
        raise DimensionError(
            f"carope_base_freq: w maps to {params.w.shape[1]} heads, config has {cfg.n_heads}")
    z = nc.add(nc.matmul(x, params.w), params.b)  # [batch, seq, heads]
    z = nc.transpose(z, 1, 2)  # [batch, heads, seq]
    f = nc.bounded_freq(z, FREQ_LOGIT_MIN, cfg.freq_logit_max)
    return FreqTensor(f)


def carope_phases(freq: FreqTensor, cfg: RotaryConfig) -> PhaseTensor:
    """Accumulate per-pair phases from per-token frequencies.

    Pair i (1-based) contributes f_t**i per token t, and the phase at
    position m is the exclusive running sum over t < m, so position 0 is
    unrotated and phases grow monotonically along the sequence. Powers are
    taken as exp(i * log f), which is safe because f is strictly in (0, 1).
    """
    f = freq.values
    fd = f.data
    if not ((fd > 0.0).all() and (fd < 1.0).all()):
        raise ContractError("carope_phases: frequencies must lie strictly inside (0, 1)")
    b, h, t = f.shape
    if h != cfg.n_heads:
        raise DimensionError(f"carope_phases: freq has {h} heads, config has {cfg.n_heads}")
    logf = nc.reshape(nc.log(f), (b, h, t, 1))
    logf = nc.repeat_last(logf, cfg.n_pairs)
    ivec = nc.Tensor(np.arange(1, cfg.n_pairs + 1, dtype=np.float64), dtype=np.float64)
    powers = nc.exp(nc.mul(logf, ivec))  # [b, h, t, pairs] = f**i
    phases = nc.cumsum_exclusive(powers, axis=2)
    return PhaseTensor(phases)


def apply_rotary(qk: nc.Tensor, phases: PhaseTensor) -> nc.Tensor:
    """Rotate query or key features [batch, heads, seq, d_head] by `phases`."""
    if qk.ndim != 4:
        raise DimensionError(f"apply_rotary: qk must be [batch, heads, seq, d_head], got {qk.shape}")
    return nc.rotate_pairs(qk, phases.values)


# --- additive position tables ---


def _sinusoidal_values(max_positions: int, d_model: int, base: float = 10000.0) -> np.ndarray:
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    j = np.arange(d_model // 2, dtype=np.float64)[None, :]
    ang = pos / (base ** (2.0 * j / d_model))
    table = np.empty((max_positions, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table


def sinusoidal_table(max_positions: int, d_model: int, dtype=np.float32) -> ApeTable:
    """Fixed interleaved sin/cos table; row p is [sin(p/w_0), cos(p/w_0), ...]."""
    if max_positions < 1:
        raise ContractError(f"max_positions must be >= 1, got {max_positions}")
    if d_model < 2 or d_model % 2 != 0:
        raise DimensionError(f"sinusoidal table needs even d_model >= 2, got {d_model}")
    vals = _sinusoidal_values(max_positions, d_model)
    return ApeTable(table=nc.Tensor(vals, dtype=dtype), kind=SINUSOIDAL)


def learnable_table(max_positions: int, d_model: int, rng: np.random.Generator,
                    init_scale: float = 0.02, dtype=np.float32) -> ApeTable:
    """Trainable position table, Gaussian init."""
    if max_positions < 1:
        raise ContractError(f"max_positions must be >= 1, got {max_positions}")
    if d_model < 1:
        raise DimensionError(f"d_model must be >= 1, got {d_model}")
    vals = rng.normal(0.0, init_scale, size=(max_positions, d_model))
    return ApeTable(table=nc.Tensor(vals, dtype=dtype, requires_grad=True), kind=LEARNABLE)


def ape_lookup(ape: ApeTable, seq_len: int) -> nc.Tensor:
    """Rows [0, seq_len) of the table, shape [seq_len, d_model].

    The sinusoidal table silently regrows to cover longer sequences; the
    learnable table has nothing trained beyond its size and raises instead.
    """
    if seq_len < 1:
        raise ContractError(f"seq_len must be >= 1, got {seq_len}")
    if seq_len > ape.max_positions:
        if ape.kind == LEARNABLE:
            raise PositionRangeError(
                f"learnable position table covers {ape.max_positions} positions, "
                f"got sequence of length {seq_len}")
        vals = _sinusoidal_values(seq_len, ape.table.shape[1])
        ape.table = nc.Tensor(vals, dtype=ape.table.dtype)
        ape.max_positions = seq_len
    return nc.gather_rows(ape.table, np.arange(seq_len))
