"""A miniature decoder-only transformer over the numcore autodiff layer.

Pre-norm blocks, GELU MLP at 4x width, multi-head causal attention, tied
input/output embeddings by default, no dropout. The position encoding is
chosen per model: additive tables (sinusoidal or learnable) added to token
embeddings, or rotary phases (classic or context-aware) applied to queries
and keys inside every attention layer. Rotary phases are computed once per
forward pass from the raw token embeddings and shared across layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from . import posenc as pe
from .errors import ConfigError, ContractError, DimensionError

_DTYPES = {"float32": np.float32, "float64": np.float64}

MASK_VALUE = -1e30  # additive pre-softmax penalty; finite so debug checks stay usable


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; `encoding` picks the position strategy."""

    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int
    max_context: int
    encoding: str
    tie_embeddings: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.n_heads < 1:
            raise ConfigError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.d_model < 2:
            raise ConfigError(f"d_model must be >= 2, got {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.d_head % 2 != 0:
            raise ConfigError(f"d_head must be even for pairwise rotation, got {self.d_head}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.max_context < 1:
            raise ConfigError(f"max_context must be >= 1, got {self.max_context}")
        if self.encoding not in pe.ENCODINGS:
            raise ConfigError(
                f"encoding must be one of {', '.join(pe.ENCODINGS)}, got {self.encoding!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rotary(self) -> pe.RotaryConfig:
        return pe.RotaryConfig(d_head=self.d_head, n_heads=self.n_heads)


def param_count(config: ModelConfig) -> int:
    """Total trainable scalar count for a model built from `config`."""
    d = config.d_model
    per_layer = 2 * (2 * d) + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
    n = config.vocab_size * d + config.n_layers * per_layer + 2 * d
    if not config.tie_embeddings:
        n += d * config.vocab_size
    if config.encoding == pe.LEARNABLE:
        n += config.max_context * d
    elif config.encoding == pe.CAROPE:
        n += d * config.n_heads + config.n_heads
    return n


class TransformerState:
    """Named parameters plus any encoding-specific tables for one model.

    `params` holds every trainable tensor in a stable order (iteration order
    is the checkpoint order). Shared weights are drawn before any
    encoding-specific extras, so two models with the same seed and different
    encodings agree on all common parameters.
    """

    def __init__(self, config: ModelConfig, dtype="float32") -> None:
        if isinstance(dtype, str):
            if dtype not in _DTYPES:
                raise ConfigError(f"dtype must be float32 or float64, got {dtype!r}")
            dtype = _DTYPES[dtype]
        dtype = np.dtype(dtype)
        if dtype not in nc.FLOAT_DTYPES:
            raise ConfigError(f"dtype must be float32 or float64, got {dtype}")
        self.config = config
        self.dtype = dtype
        self.params: dict[str, nc.Tensor] = {}
        self.ape: pe.ApeTable | None = None
        self.carope: pe.CaropeParams | None = None
        self._rope_cache: dict[int, pe.PhaseTensor] = {}

        rng = np.random.default_rng(config.seed)
        d, v = config.d_model, config.vocab_size
        std = 0.02
        resid_std = std / np.sqrt(2.0 * max(config.n_layers, 1))

        def draw(name: str, shape, scale: float) -> None:
            self.params[name] = nc.Tensor(
                rng.normal(0.0, scale, size=shape), dtype=dtype, requires_grad=True)

        def fill(name: str, shape, value: float) -> None:
            self.params[name] = nc.Tensor(
                np.full(shape, value), dtype=dtype, requires_grad=True)

        draw("tok_emb", (v, d), std)
        for i in range(config.n_layers):
            p = f"h{i}."
            fill(p + "ln1.g", (d,), 1.0)
            fill(p + "ln1.b", (d,), 0.0)
            draw(p + "attn.wq", (d, d), std)
            fill(p + "attn.bq", (d,), 0.0)
            draw(p + "attn.wk", (d, d), std)
            fill(p + "attn.bk", (d,), 0.0)
            draw(p + "attn.wv", (d, d), std)
            fill(p + "attn.bv", (d,), 0.0)
            draw(p + "attn.wo", (d, d), resid_std)
            fill(p + "attn.bo", (d,), 0.0)
            fill(p + "ln2.g", (d,), 1.0)
            fill(p + "ln2.b", (d,), 0.0)
            draw(p + "mlp.w1", (d, 4 * d), std)
            fill(p + "mlp.b1", (4 * d,), 0.0)
            draw(p + "mlp.w2", (4 * d, d), resid_std)
            fill(p + "mlp.b2", (d,), 0.0)
        fill("ln_f.g", (d,), 1.0)
        fill("ln_f.b", (d,), 0.0)
        if not config.tie_embeddings:
            draw("lm_head", (d, v), std)

        if config.encoding == pe.SINUSOIDAL:
            self.ape = pe.sinusoidal_table(config.max_context, d, dtype=dtype)
        elif config.encoding == pe.LEARNABLE:
            self.ape = pe.learnable_table(config.max_context, d, rng, std, dtype=dtype)
            self.params["pos_emb"] = self.ape.table
        elif config.encoding == pe.CAROPE:
            self.carope = pe.carope_init_rope(config.rotary, d, dtype=dtype)
            self.params["carope.w"] = self.carope.w
            self.params["carope.b"] = self.carope.b

    def rope_phases(self, seq_len: int) -> pe.PhaseTensor:
        cached = self._rope_cache.get(seq_len)
        if cached is None:
            cached = pe.rope_phases(seq_len, self.config.rotary)
            self._rope_cache[seq_len] = cached
        return cached

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())


_MASK_CACHE: dict[tuple[int, str], nc.Tensor] = {}


def causal_mask(seq_len: int, dtype) -> nc.Tensor:
    """Additive [seq_len, seq_len] mask: 0 at or before the query, -1e30 after."""
    key = (seq_len, np.dtype(dtype).name)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        m = np.triu(np.full((seq_len, seq_len), MASK_VALUE), k=1)
        cached = nc.Tensor(m, dtype=dtype)
        _MASK_CACHE[key] = cached
    return cached


def causal_attention(q: nc.Tensor, k: nc.Tensor, v: nc.Tensor,
                     phases: pe.PhaseTensor | None = None) -> nc.Tensor:
    """Scaled dot-product attention with a strict causal mask.

    q, k, v are [batch, heads, seq, d_head]. When `phases` is given, q and k
    are pair-rotated before the dot product, so relative rotation lands in
    the attention scores. Position t attends to positions <= t only.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.ndim != 4:
            raise DimensionError(f"causal_attention: {name} must be 4-d, got {t.shape}")
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(
            f"causal_attention: mismatched shapes {q.shape}, {k.shape}, {v.shape}")
    if phases is not None:
        q = pe.apply_rotary(q, phases)
        k = pe.apply_rotary(k, phases)
    seq_len, d_head = q.shape[2], q.shape[3]
    scores = nc.mul(nc.matmul(q, nc.transpose(k, 2, 3)), 1.0 / float(np.sqrt(d_head)))
    scores = nc.add(scores, causal_mask(seq_len, q.dtype))
    return nc.matmul(nc.softmax_lastdim(scores), v)


def _split_heads(x: nc.Tensor, n_heads: int) -> nc.Tensor:
    b, t, d = x.shape
    return nc.transpose(nc.reshape(x, (b, t, n_heads, d // n_heads)), 1, 2)


def _merge_heads(x: nc.Tensor) -> nc.Tensor:
    b, h, t, dh = x.shape
    return nc.reshape(nc.transpose(x, 1, 2), (b, t, h * dh))


def _validate_tokens(state: TransformerState, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise ContractError(f"tokens must be an integer array, got dtype {tokens.dtype}")
    if tokens.ndim != 2 or tokens.shape[0] < 1 or tokens.shape[1] < 1:
        raise DimensionError(f"tokens must be [batch, seq] and non-empty, got {tokens.shape}")
    v = state.config.vocab_size
    if tokens.min() < 0 or tokens.max() >= v:
        raise ContractError(f"token id out of range [0, {v})")
    return tokens


def forward(state: TransformerState, tokens: np.ndarray) -> nc.Tensor:
    """Next-token logits [batch, seq, vocab] for an integer [batch, seq] array.

    Fixed position tables raise PositionRangeError when the learnable table
    is shorter than the input; rotary encodings accept any length.
    """
    tokens = _validate_tokens(state, tokens)
    cfg = state.config
    seq_len = tokens.shape[1]
    params = state.params

    x = nc.gather_rows(params["tok_emb"], tokens)  # [b, t, d]

    phases: pe.PhaseTensor | None = None
    if cfg.encoding == pe.ROPE:
        phases = state.rope_phases(seq_len)
    elif cfg.encoding == pe.CAROPE:
        freq = pe.carope_base_freq(x, state.carope, cfg.rotary)
        phases = pe.carope_phases(freq, cfg.rotary)
    else:
        x = nc.add(x, pe.ape_lookup(state.ape, seq_len))

    for i in range(cfg.n_layers):
        p = f"h{i}."
        h = nc.layernorm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = _split_heads(nc.add(nc.matmul(h, params[p + "attn.wq"]), params[p + "attn.bq"]),
                         cfg.n_heads)
        k = _split_heads(nc.add(nc.matmul(h, params[p + "attn.wk"]), params[p + "attn.bk"]),
                         cfg.n_heads)
        v = _split_heads(nc.add(nc.matmul(h, params[p + "attn.wv"]), params[p + "attn.bv"]),
                         cfg.n_heads)
        att = _merge_heads(causal_attention(q, k, v, phases))
        att = nc.add(nc.matmul(att, params[p + "attn.wo"]), params[p + "attn.bo"])
        x = nc.add(x, att)
        h = nc.layernorm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = nc.gelu(nc.add(nc.matmul(h, params[p + "mlp.w1"]), params[p + "mlp.b1"]))
        h = nc.add(nc.matmul(h, params[p + "mlp.w2"]), params[p + "mlp.b2"])
        x = nc.add(x, h)

    x = nc.layernorm(x, params["ln_f.g"], params["ln_f.b"])
    if cfg.tie_embeddings:
        return nc.matmul(x, nc.transpose(params["tok_emb"], 0, 1))
    return nc.matmul(x, params["lm_head"])


def cross_entropy(logits: nc.Tensor, targets: np.ndarray) -> nc.Tensor:
    """Mean next-token loss in nats over a [batch, seq] target array."""
    if logits.ndim != 3:
        raise DimensionError(f"cross_entropy: logits must be [batch, seq, vocab], got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:2]:
        raise DimensionError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape[:2]}")
    b, t, v = logits.shape
    return nc.cross_entropy_mean(nc.reshape(logits, (b * t, v)), targets.reshape(-1))


def loss_on_batch(state: TransformerState, tokens: np.ndarray,
                  targets: np.ndarray) -> nc.Tensor:
    return cross_entropy(forward(state, tokens), targets)
