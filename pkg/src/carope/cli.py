"""Command line front end: train, eval, bench, gradcheck, inspect.

Configuration is a flat `key = value` file with `#` comments; a handful of
flags override file values. Exit codes: 0 success, 1 usage or configuration
or input problems, 2 numeric failures (non-finite training, failed gradient
check).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as dt
from . import evalbench as eb
from . import posenc as pe
from . import train as tr
from .errors import CaropeError, ConfigError, GradCheckError, NumericError
from .model import ModelConfig, TransformerState, param_count


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; usage errors are 1 here
        raise _UsageError(message)


@dataclass
class RunSettings:
    """Everything outside ModelConfig/TrainConfig that a run needs."""

    data: str = ""
    out: str = ""
    dtype: str = "float32"
    split_fraction: float = 0.99
    eval_lengths: tuple[int, ...] = (64, 128)
    eval_batch_size: int = 32
    log_interval: int = 100

    def __post_init__(self) -> None:
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not (0.0 < self.split_fraction < 1.0):
            raise ConfigError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.eval_batch_size < 1:
            raise ConfigError(f"eval_batch_size must be >= 1, got {self.eval_batch_size}")
        if self.log_interval < 1:
            raise ConfigError(f"log_interval must be >= 1, got {self.log_interval}")
        if not self.eval_lengths:
            raise ConfigError("eval_lengths must list at least one length")
        if any(n < 1 for n in self.eval_lengths):
            raise ConfigError(f"eval_lengths must be positive, got {self.eval_lengths}")


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(tr.TrainConfig)}
_RUN_KEYS = {f.name for f in fields(RunSettings)}


def parse_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{p}:{lineno}: empty key or value")
        if key in values:
            raise ConfigError(f"{p}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _convert(key: str, value: str, target_type):
    try:
        if target_type is bool:
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        if key == "eval_lengths":
            return parse_lengths(value)
        return value
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: {e}") from None


def parse_lengths(text: str) -> tuple[int, ...]:
    try:
        lengths = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"lengths must be comma-separated integers, got {text!r}") from None
    if not lengths:
        raise ConfigError(f"lengths must name at least one integer, got {text!r}")
    return lengths


_FIELD_TYPES = {
    **{f.name: f.type for f in fields(ModelConfig)},
    **{f.name: f.type for f in fields(tr.TrainConfig)},
    "data": str, "out": str, "dtype": str, "split_fraction": float,
    "eval_lengths": tuple, "eval_batch_size": int, "log_interval": int,
}
_TYPE_NAMES = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple,
               "tuple[int, ...]": tuple}


def build_settings(config_path=None, overrides: dict | None = None,
                   ) -> tuple[ModelConfig, tr.TrainConfig, RunSettings]:
    """Merge file values and flag overrides into validated config objects."""
    raw = parse_config_file(config_path) if config_path else {}
    typed: dict[str, object] = {}
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        t = _FIELD_TYPES[key]
        t = _TYPE_NAMES.get(t, t) if isinstance(t, str) else t
        typed[key] = _convert(key, value, t)
    for key, value in (overrides or {}).items():
        if value is not None:
            typed[key] = value
    seed = typed.pop("seed", 0)
    model_kwargs = {k: v for k, v in typed.items() if k in _MODEL_KEYS}
    train_kwargs = {k: v for k, v in typed.items() if k in _TRAIN_KEYS}
    run_kwargs = {k: v for k, v in typed.items() if k in _RUN_KEYS}
    missing = [k for k in ("n_layers", "n_heads", "d_model", "vocab_size",
                           "max_context", "encoding") if k not in model_kwargs]
    if missing:
        raise ConfigError(f"config is missing required keys: {', '.join(missing)}")
    model_cfg = ModelConfig(seed=seed, **model_kwargs)
    train_cfg = tr.TrainConfig(seed=seed, **train_kwargs)
    return model_cfg, train_cfg, RunSettings(**run_kwargs)


def effective_config_text(model_cfg: ModelConfig, train_cfg: tr.TrainConfig,
                          run: RunSettings) -> str:
    lines = []
    for obj in (model_cfg, train_cfg, run):
        for f in fields(obj):
            if f.name == "seed" and obj is train_cfg:
                continue  # one shared seed, echoed once from the model config
            value = getattr(obj, f.name)
            if f.name == "eval_lengths":
                value = ",".join(str(v) for v in value)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def _write_emit(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.emit_line() + "\n")


# --- subcommands ---


def cmd_train(args) -> int:
    model_cfg, train_cfg, run = build_settings(args.config, {
        "encoding": args.encoding, "seed": args.seed, "out": args.out,
        "total_steps": args.steps,
    })
    if not run.data:
        raise ConfigError("no corpus: set 'data' in the config file")
    if not run.out:
        raise ConfigError("no output directory: set 'out' in the config or pass --out")
    corpus = dt.ingest(run.data, run.split_fraction)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(
        effective_config_text(model_cfg, train_cfg, run), encoding="utf-8")
    state = TransformerState(model_cfg, dtype=run.dtype)
    print(f"training encoding={model_cfg.encoding} params={state.n_params()} "
          f"steps={train_cfg.total_steps} corpus={corpus.n_tokens} tokens "
          f"(sha256 {corpus.digest[:12]})")

    def sink(line: str) -> None:
        step = int(line.split(" ", 1)[0].split("=", 1)[1])
        if step % run.log_interval == 0 or step + 1 == train_cfg.total_steps:
            print(line)

    meta = {"data_path": str(Path(run.data).resolve()),
            "split_fraction": run.split_fraction,
            "corpus_sha256": corpus.digest}
    tr.train(state, corpus, train_cfg, out_dir=out, sink=sink, meta=meta)
    print(f"done: {out / 'model-final.ckpt'}")
    return 0


def _load_for_eval(ckpt_path, data_override, split_override):
    state, train_cfg, step, _rng, _opt, meta = tr.load_checkpoint(ckpt_path)
    data_path = data_override or meta.get("data_path", "")
    if not data_path:
        raise ConfigError(
            f"{ckpt_path}: checkpoint does not name its corpus; pass --data")
    split = split_override if split_override is not None \
        else meta.get("split_fraction", 0.99)
    corpus = dt.ingest(data_path, split)
    return state, corpus, step


def cmd_eval(args) -> int:
    lengths = list(parse_lengths(args.lengths)) if args.lengths else [64, 128]
    states: dict[str, TransformerState] = {}
    corpus = None
    for ckpt in args.ckpt:
        state, this_corpus, step = _load_for_eval(ckpt, args.data, None)
        enc = state.config.encoding
        if enc in states:
            raise ConfigError(f"two checkpoints share encoding {enc!r}; pass one per encoding")
        if corpus is not None and this_corpus.digest != corpus.digest:
            raise ConfigError("checkpoints were trained on different corpora")
        corpus = this_corpus
        states[enc] = state
        print(f"loaded {ckpt}: encoding={enc} step={step}")
    records, table = eb.extrapolation_report(states, corpus, lengths,
                                             batch_size=args.batch_size)
    print(table)
    for rec in records:
        if rec.note:
            print(f"note: encoding={rec.encoding} seq_len={rec.seq_len}: {rec.note}")
    if args.emit:
        _write_emit(args.emit, records)
        print(f"wrote {len(records)} records to {args.emit}")
    return 0


def cmd_bench(args) -> int:
    model_cfg, train_cfg, _run = build_settings(args.config, {
        "encoding": args.encoding, "seed": args.seed,
    })
    if args.encoding:
        rec = eb.throughput_bench(model_cfg, train_cfg, seed=train_cfg.seed)
        print(rec.emit_line())
        records = [rec]
    else:
        rec_rope, rec_carope, ratio = eb.bench_compare(
            model_cfg, train_cfg, seed=train_cfg.seed)
        print(rec_rope.emit_line())
        print(rec_carope.emit_line())
        print(f"step-time ratio (carope/rope): {ratio:.3f}")
        records = [rec_rope, rec_carope]
    if args.emit:
        _write_emit(args.emit, records)
    return 0


_GRADCHECK_DEFAULT = dict(n_layers=1, n_heads=2, d_model=8, vocab_size=11,
                          max_context=8)


def cmd_gradcheck(args) -> int:
    if args.config:
        model_cfg, _train_cfg, _run = build_settings(args.config, {
            "encoding": args.encoding, "seed": args.seed,
        })
    else:
        model_cfg = ModelConfig(encoding=args.encoding or pe.CAROPE,
                                seed=args.seed or 0, **_GRADCHECK_DEFAULT)
    report = eb.grad_check(model_cfg)
    print(report.format())
    eb.require_pass(report)
    return 0


def cmd_inspect(args) -> int:
    state, train_cfg, step, _rng, _opt, meta = tr.load_checkpoint(args.ckpt)
    cfg = state.config
    print(f"checkpoint: {args.ckpt}")
    print(f"step: {step}")
    print(f"model: encoding={cfg.encoding} n_layers={cfg.n_layers} n_heads={cfg.n_heads} "
          f"d_model={cfg.d_model} vocab_size={cfg.vocab_size} max_context={cfg.max_context} "
          f"tie_embeddings={cfg.tie_embeddings} seed={cfg.seed}")
    print(f"dtype: {state.dtype.name}")
    print(f"parameters: {state.n_params()} (formula {param_count(cfg)})")
    print(f"train: total_steps={train_cfg.total_steps} max_lr={train_cfg.max_lr} "
          f"min_lr={train_cfg.min_lr} warmup_steps={train_cfg.warmup_steps} "
          f"batch_size={train_cfg.batch_size} seq_len={train_cfg.seq_len} "
          f"tokens_per_update={train_cfg.tokens_per_update}")
    if meta:
        for k in sorted(meta):
            print(f"meta.{k}: {meta[k]}")
    if cfg.encoding == pe.CAROPE:
        rng = np.random.default_rng(0)
        tokens = rng.integers(0, cfg.vocab_size,
                              size=(4, min(32, cfg.max_context)))
        from . import numcore as nc
        emb = nc.gather_rows(state.params["tok_emb"], tokens)
        freq = pe.carope_base_freq(emb, state.carope, cfg.rotary).values.data
        print("base frequencies over a seeded sample batch, per head:")
        for h in range(cfg.n_heads):
            fh = freq[:, h, :]
            print(f"  head {h}: min={fh.min():.6f} mean={fh.mean():.6f} max={fh.max():.6f}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="carope",
                     description="Context-aware rotary position encoding testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write checkpoints")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--encoding", choices=pe.ENCODINGS, help="override the encoding")
    p.add_argument("--seed", type=int, help="override init and sampling seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--steps", type=int, help="override total_steps")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="perplexity grid over sequence lengths")
    p.add_argument("--ckpt", action="append", required=True,
                   help="checkpoint to score (repeat for several encodings)")
    p.add_argument("--data", help="corpus path (defaults to the training corpus)")
    p.add_argument("--lengths", help="comma-separated sequence lengths (default 64,128)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--emit", help="write machine-readable records to this file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="throughput of full optimization steps")
    p.add_argument("--config", required=True)
    p.add_argument("--encoding", choices=pe.ENCODINGS,
                   help="bench one encoding instead of the rope/carope pair")
    p.add_argument("--seed", type=int)
    p.add_argument("--emit", help="write machine-readable records to this file")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck",
                       help="compare analytic gradients to finite differences")
    p.add_argument("--config", help="model config (default: built-in tiny model)")
    p.add_argument("--encoding", choices=pe.ENCODINGS)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (NumericError, GradCheckError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except CaropeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
