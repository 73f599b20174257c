"""Line-based ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Every key must be known;
values are parsed according to the type of the key's default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .data import DataConfig
from .latent import ReasoningConfig
from .model import ModelConfig
from .training import LossWeights, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = f"{source or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class RunConfig:
    """Everything a subcommand needs, flattened to one namespace."""

    # reasoning
    mode: str = "pccot"
    c: int = 24
    T: int = 3
    # model
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 128
    max_positions: int = 128
    precision: str = "32"
    # data
    data_dir: str = ""
    data_seed: int = 0
    count: int = 1000
    dev_count: int = 500
    test_count: int = 1000
    min_steps: int = 2
    max_steps: int = 3
    min_operand: int = 1
    max_operand: int = 9
    max_value: int = 99
    # training
    seed: int = 0
    lr: float = 3e-3
    batch_size: int = 128
    epochs: int = 40
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    ce_reduction: str = "mean"
    freeze_latent: bool = False
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    # evaluation / analysis
    checkpoint: str = ""
    eval_mode: str = "latent"
    eval_split: str = "test"
    eval_batch: int = 256
    verify_models: int = 20
    verify_tol: float = 1e-8
    bench_batch: int = 64
    bench_reps: int = 7
    bench_warmup: int = 2
    bench_query_len: int = 32
    bench_Ts: str = "1,2,3,4"
    T_max: int = 24
    analysis_batch: int = 32
    perturb_seed: int = 0
    sweep_cs: str = "0,4,8"
    sweep_Ts: str = "0,1,3"
    sweep_seeds: str = "0,1,2"

    def reasoning(self) -> ReasoningConfig:
        if self.mode == "ccot":
            return ReasoningConfig("ccot", self.c, 0)
        if self.mode == "pccot" and (self.c == 0 or self.T == 0):
            return ReasoningConfig.for_cell(self.c, self.T)
        return ReasoningConfig(self.mode, self.c, self.T)

    def model(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(self.n_layers, self.n_heads, self.d_model, self.d_ff, vocab_size, self.max_positions,
                           self.precision)

    def data(self) -> DataConfig:
        return DataConfig(self.data_seed, self.count, self.dev_count, self.test_count, self.min_steps,
                          self.max_steps, self.min_operand, self.max_operand, self.max_value)

    def train(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           weight_decay=self.weight_decay, clip_norm=self.clip_norm,
                           warmup_ratio=self.warmup_ratio, schedule=self.schedule, beta1=self.beta1,
                           beta2=self.beta2, seed=self.seed, ce_reduction=self.ce_reduction,
                           freeze_latent=self.freeze_latent)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def parse_value(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key} expects {kind.__name__}, got {raw!r}") from None
    return raw


def parse_config(text: str, source: str | None = None) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", n, source)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", n, source)
        try:
            out[key] = parse_value(key, raw)
        except ConfigError as e:
            raise ConfigError(str(e), n, source) from None
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then explicit overrides (e.g. command-line flags)."""
    values = {}
    if path:
        with open(path, encoding="utf-8") as f:
            values.update(parse_config(f.read(), str(path)))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v if not isinstance(v, str) else parse_value(k, v)
    try:
        cfg = replace(RunConfig(), **values)
        cfg.reasoning()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), source=str(path) if path else None) from None
    return cfg


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.as_dict().items())
