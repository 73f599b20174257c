"""Decoder-only transformer with learned positions, KV caching and vector injection.

Any position may take either a token id (looked up in the embedding table)
or an arbitrary hidden vector of model width.  The learned position
embedding is added in both cases, so injecting exactly ``E[token]`` is
indistinguishable from feeding the token.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

# hidden states fed back as latent inputs are read after the final layer norm
HIDDEN_FEED = "post_final_norm"
CHECKPOINT_MAGIC = b"PCCOTCK\x00"
CHECKPOINT_VERSION = 1


class PositionOverflow(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    def __init__(self, expected: "ModelConfig", found: "ModelConfig"):
        self.expected = expected
        self.found = found
        diff = {k: (v, getattr(found, k)) for k, v in asdict(expected).items() if getattr(found, k) != v}
        super().__init__(f"checkpoint config differs from expected: {diff}")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 128
    vocab_size: int = 64
    max_positions: int = 128
    precision: str = "64"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.precision not in ("32", "64"):
            raise ValueError(f"precision must be '32' or '64', got {self.precision!r}")
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def dtype(self) -> np.dtype:
        return ad.resolve_dtype(self.precision)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"wte": (cfg.vocab_size, d), "wpe": (cfg.max_positions, d)}
    for i in range(cfg.n_layers):
        p = f"h.{i}."
        shapes.update({
            p + "ln_1.g": (d,), p + "ln_1.b": (d,),
            p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
            p + "attn.w_proj": (d, d), p + "attn.b_proj": (d,),
            p + "ln_2.g": (d,), p + "ln_2.b": (d,),
            p + "mlp.w_fc": (d, f), p + "mlp.b_fc": (f,),
            p + "mlp.w_proj": (f, d), p + "mlp.b_proj": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,)})
    return shapes


class TransformerWeights:
    """All learnable parameters.  The LM head is tied to ``wte``."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = _param_shapes(config)
        if set(params) != set(expected):
            raise ValueError(f"parameter names differ: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError("weights", name, shape, params[name].shape)
        self.config = config
        self.params = {name: params[name] for name in expected}
        self.frozen_rows: frozenset[int] = frozenset()

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, std: float = 0.02, randomize_norms: bool = False):
        """GPT-2 style init; ``randomize_norms`` also draws layer-norm and bias values.

        The randomized variant is for equivalence checks, where a near-identity
        network would make differences trivially small.
        """
        rng = np.random.default_rng(seed)
        dt = config.dtype
        params = {}
        proj_std = std / math.sqrt(2 * config.n_layers)
        for name, shape in _param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                v = 1.0 + (0.1 * rng.standard_normal(shape) if randomize_norms else 0.0)
            elif leaf.startswith("b"):
                v = 0.1 * rng.standard_normal(shape) if randomize_norms else 0.0
            elif name.endswith("w_proj"):
                v = proj_std * rng.standard_normal(shape)
            else:
                v = std * rng.standard_normal(shape)
            params[name] = ad.parameter(np.broadcast_to(np.asarray(v, dtype=dt), shape).copy(), name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def copy(self) -> "TransformerWeights":
        w = TransformerWeights(self.config, {k: ad.parameter(v.data.copy(), name=k) for k, v in self.params.items()})
        w.frozen_rows = self.frozen_rows
        return w

    def astype(self, precision: str) -> "TransformerWeights":
        cfg = ModelConfig(**{**asdict(self.config), "precision": precision})
        dt = cfg.dtype
        w = TransformerWeights(cfg, {k: ad.parameter(v.data.astype(dt), name=k) for k, v in self.params.items()})
        w.frozen_rows = self.frozen_rows
        return w

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())


@dataclass(frozen=True)
class PositionInput:
    """One sequence position: a token id or an injected hidden vector."""

    token: int | None = None
    vector: np.ndarray | None = None

    def __post_init__(self):
        if (self.token is None) == (self.vector is None):
            raise ValueError("PositionInput needs exactly one of token or vector")


@dataclass(frozen=True)
class KVCache:
    """Per-layer keys/values for a contiguous prefix of columns.

    ``valid`` marks real (non-padding) columns per batch row; the absolute
    position of the next token in row ``b`` is ``valid[b].sum()``.
    ``checkpoints`` are the lengths this cache may be truncated back to.
    """

    keys: tuple[Tensor, ...]
    values: tuple[Tensor, ...]
    valid: np.ndarray
    checkpoints: tuple[int, ...] = field(default=(0,))

    @property
    def length(self) -> int:
        return self.valid.shape[1]

    @property
    def batch_size(self) -> int:
        return self.valid.shape[0]

    @property
    def next_position(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def truncate(self, length: int) -> "KVCache":
        if length == self.length:
            return self
        if length not in self.checkpoints:
            raise ValueError(f"cache can only be truncated to a recorded checkpoint {self.checkpoints}, not {length}")
        idx = (slice(None), slice(None), slice(0, length))
        return KVCache(
            tuple(k[idx] for k in self.keys),
            tuple(v[idx] for v in self.values),
            self.valid[:, :length],
            tuple(c for c in self.checkpoints if c <= length),
        )


@dataclass
class ForwardOutput:
    hidden: Tensor  # (B, S, d), after the final layer norm
    cache: KVCache
    attention: list[np.ndarray] | None = None  # per layer (B, H, S, L)


class _PassCounter:
    def __init__(self):
        self.count = 0


_counters: list[_PassCounter] = []


@contextlib.contextmanager
def count_forward_passes():
    """Count calls to :func:`forward` made inside the block."""
    c = _PassCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def embed_tokens(weights: TransformerWeights, ids: np.ndarray) -> Tensor:
    return ad.embedding(weights["wte"], np.asarray(ids))


def embed_inputs(weights: TransformerWeights, inputs: list[PositionInput]) -> Tensor:
    """Stack a single sequence of :class:`PositionInput` into a ``(1, S, d)`` tensor."""
    d = weights.config.d_model
    rows = []
    run: list[int] = []

    def flush():
        if run:
            rows.append(embed_tokens(weights, np.asarray(run)[None, :]))
            run.clear()

    for i, item in enumerate(inputs):
        if item.token is not None:
            run.append(item.token)
            continue
        flush()
        vec = item.vector if isinstance(item.vector, Tensor) else Tensor(np.asarray(item.vector, dtype=weights.config.dtype))
        if vec.shape[-1] != d or vec.data.size != d:
            raise ShapeError("forward", f"inputs[{i}].vector", (d,), vec.shape)
        rows.append(vec.reshape(1, 1, d))
    flush()
    return ad.concat(rows, axis=1) if len(rows) > 1 else rows[0]


def forward(
    weights: TransformerWeights,
    x: Tensor,
    cache: KVCache | None = None,
    valid: np.ndarray | None = None,
    return_attention: bool = False,
    marks: tuple[int, ...] = (),
) -> ForwardOutput:
    """Run the blocks over new columns ``x`` (``(B, S, d)`` input vectors).

    ``valid`` (``(B, S)``, default all True) marks padding; padded columns
    are never attended to by other columns.  Keys/values of the new columns
    are appended to ``cache`` (a new cache object is returned).  ``marks``
    are extra cache lengths inside this block that may later be truncated to.
    """
    cfg = weights.config
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ShapeError("forward", "x", ("B", "S", cfg.d_model), x.shape)
    B, S, d = x.shape
    H, hd = cfg.n_heads, cfg.head_dim
    if valid is None:
        valid = np.ones((B, S), dtype=bool)
    if cache is not None and cache.batch_size != B:
        raise ShapeError("forward", "cache", f"batch {B}", (cache.batch_size,))
    past = cache.length if cache is not None else 0
    base = cache.next_position if cache is not None else np.zeros(B, dtype=np.int64)
    pos = base[:, None] + np.cumsum(valid, axis=1) - 1
    if valid.any() and pos[valid].max() >= cfg.max_positions:
        raise PositionOverflow(f"position {int(pos[valid].max())} >= max_positions {cfg.max_positions}")
    pos = np.clip(pos, 0, cfg.max_positions - 1)
    for c in _counters:
        c.count += 1

    all_valid = valid if cache is None else np.concatenate([cache.valid, valid], axis=1)
    L = past + S
    qcol = past + np.arange(S)
    causal = np.arange(L)[None, :] <= qcol[:, None]
    diag = np.arange(L)[None, :] == qcol[:, None]
    mask = (causal[None] & (all_valid[:, None, :] | diag[None]))[:, None]  # (B,1,S,L)

    h = x + ad.embedding(weights["wpe"], pos)
    keys, values, attn = [], [], []
    qscale = 1.0 / math.sqrt(hd)
    eps = cfg.ln_eps
    for i in range(cfg.n_layers):
        p = f"h.{i}."
        a = ad.layer_norm(h, weights[p + "ln_1.g"], weights[p + "ln_1.b"], eps)
        qkv = ad.matmul(a, weights[p + "attn.w_qkv"]) + weights[p + "attn.b_qkv"]
        qkv = qkv.reshape(B, S, 3, H, hd).transpose(2, 0, 3, 1, 4)  # (3,B,H,S,hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if cache is not None:
            k = ad.concat([cache.keys[i], k], axis=2)
            v = ad.concat([cache.values[i], v], axis=2)
        keys.append(k)
        values.append(v)
        scores = ad.matmul(q * qscale, k.transpose(0, 1, 3, 2))
        probs = ad.softmax(scores, mask)
        if return_attention:
            attn.append(probs.data.copy())
        y = ad.matmul(probs, v).transpose(0, 2, 1, 3).reshape(B, S, d)
        h = h + (ad.matmul(y, weights[p + "attn.w_proj"]) + weights[p + "attn.b_proj"])
        m = ad.layer_norm(h, weights[p + "ln_2.g"], weights[p + "ln_2.b"], eps)
        m = ad.gelu(ad.matmul(m, weights[p + "mlp.w_fc"]) + weights[p + "mlp.b_fc"])
        h = h + (ad.matmul(m, weights[p + "mlp.w_proj"]) + weights[p + "mlp.b_proj"])
    h = ad.layer_norm(h, weights["ln_f.g"], weights["ln_f.b"], eps)

    extra = tuple(m for m in marks if past < m < L)
    checkpoints = (cache.checkpoints if cache is not None else (0,)) + extra + (L,)
    new_cache = KVCache(tuple(keys), tuple(values), all_valid, checkpoints)
    return ForwardOutput(h, new_cache, attn if return_attention else None)


def forward_tokens(weights, ids, cache=None, valid=None, return_attention=False) -> ForwardOutput:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    return forward(weights, embed_tokens(weights, ids), cache, valid, return_attention)


def forward_inputs(weights, inputs: list[PositionInput], cache=None, return_attention=False) -> ForwardOutput:
    return forward(weights, embed_inputs(weights, inputs), cache, return_attention=return_attention)


def lm_head(weights: TransformerWeights, hidden: Tensor) -> Tensor:
    """Logits ``hidden @ wte.T`` (weight-tied, no bias)."""
    if hidden.shape[-1] != weights.config.d_model:
        raise ShapeError("lm_head", "hidden", ("...", weights.config.d_model), hidden.shape)
    return ad.matmul(hidden, weights["wte"].transpose(1, 0))


def greedy(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest token id."""
    return np.argmax(logits, axis=-1)


# -- checkpoints ------------------------------------------------------------


def _header(weights: TransformerWeights) -> bytes:
    meta = {
        "config": asdict(weights.config),
        "hidden_feed": HIDDEN_FEED,
        "params": [[k, list(v.shape)] for k, v in weights.named_parameters()],
        "frozen_rows": sorted(weights.frozen_rows),
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob


def snapshot_bytes(weights: TransformerWeights) -> bytes:
    le = "<f8" if weights.config.precision == "64" else "<f4"
    body = _header(weights) + b"".join(v.data.astype(le, copy=False).tobytes() for _, v in weights.named_parameters())
    return body + hashlib.sha256(body).digest()


def snapshot(weights: TransformerWeights, path) -> str:
    """Write a checkpoint; returns its sha256 hex digest."""
    data = snapshot_bytes(weights)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def restore_bytes(data: bytes, expected: ModelConfig | None = None) -> TransformerWeights:
    head = len(CHECKPOINT_MAGIC) + 8
    if len(data) < head + 32 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint or truncated header")
    version, n = struct.unpack("<II", data[len(CHECKPOINT_MAGIC):head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint content hash mismatch (truncated or corrupted)")
    meta = json.loads(body[head : head + n])
    if meta.get("hidden_feed") != HIDDEN_FEED:
        raise CheckpointError(f"unsupported hidden_feed {meta.get('hidden_feed')!r}")
    cfg = ModelConfig(**meta["config"])
    if expected is not None and expected != cfg:
        raise ConfigMismatch(expected, cfg)
    le = np.dtype("<f8" if cfg.precision == "64" else "<f4")
    offset = head + n
    params = {}
    for name, shape in meta["params"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype=le, count=count, offset=offset).astype(cfg.dtype).reshape(shape)
        offset += count * le.itemsize
        params[name] = ad.parameter(arr, name=name)
    if offset != len(body):
        raise CheckpointError("checkpoint payload length does not match its header")
    w = TransformerWeights(cfg, params)
    w.frozen_rows = frozenset(meta.get("frozen_rows", []))
    return w


def restore(path, expected: ModelConfig | None = None) -> TransformerWeights:
    return restore_bytes(Path(path).read_bytes(), expected)
