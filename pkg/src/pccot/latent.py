"""Sequential continuous CoT, Jacobi-parallel latent iteration, and answer decoding.

Indexing follows the hidden-state notation: for a query of length ``n`` the
latent block holds the outputs at positions ``n+1 .. n+c+1``.  Block index
``j = 1`` is the ``<bot>`` output; ``j = i + 1`` is the output of latent
token ``i``.  Iteration ``t = 1`` is the first full pass, and iteration
``t + 1`` re-feeds the iteration-``t`` outputs at ``n+1 .. n+c`` as the
inputs of positions ``n+2 .. n+c+1``.  Output ``j`` agrees with the
sequential value for every ``t >= j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import KVCache, TransformerWeights, embed_tokens, forward, greedy, lm_head

MODES = ("icot", "pause", "ccot", "pccot")


@dataclass(frozen=True)
class ReasoningConfig:
    mode: str = "pccot"
    c: int = 24
    T: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.c < 0 or self.T < 0:
            raise ValueError("c and T must be non-negative")
        if self.mode == "icot" and self.c != 0:
            raise ValueError("icot mode needs c=0")
        if self.mode == "pause" and self.T != 0:
            raise ValueError("pause mode needs T=0")
        if self.mode == "pccot" and self.c < 1:
            raise ValueError("pccot mode needs c >= 1")

    @property
    def passes(self) -> int:
        """Dependent forward passes over the latent block."""
        if self.mode == "ccot":
            return self.c + 1
        return self.T + 1 if self.c else 1

    @classmethod
    def for_cell(cls, c: int, T: int) -> "ReasoningConfig":
        if c == 0:
            return cls("icot", 0, 0)
        if T == 0:
            return cls("pause", c, 0)
        return cls("pccot", c, T)


@dataclass(frozen=True)
class SpecialTokens:
    bot_id: int = 1
    latent_id: int = 2
    eot_id: int = 3
    eoa_id: int = 4
    pad_id: int = 0
    prompt_ids: tuple[int, ...] = ()

    def __post_init__(self):
        ids = (self.bot_id, self.latent_id, self.eot_id, self.eoa_id, self.pad_id)
        if len(set(ids)) != len(ids):
            raise ValueError("special token ids must be pairwise distinct")
        if set(self.prompt_ids) & set(ids):
            raise ValueError("answer prompt may not contain special tokens")

    @classmethod
    def from_tokenizer(cls, tok) -> "SpecialTokens":
        return cls(tok.bot_id, tok.latent_id, tok.eot_id, tok.eoa_id, tok.pad_id, tuple(tok.prompt_ids))


@dataclass
class QueryBatch:
    """Left-padded query token ids."""

    ids: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_lists(cls, seqs, pad_id: int = 0) -> "QueryBatch":
        seqs = [list(s) for s in seqs]
        if not seqs or any(len(s) == 0 for s in seqs):
            raise ValueError("queries must be non-empty")
        n = max(len(s) for s in seqs)
        ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
        valid = np.zeros((len(seqs), n), dtype=bool)
        for r, s in enumerate(seqs):
            ids[r, n - len(s):] = s
            valid[r, n - len(s):] = True
        return cls(ids, valid)

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    def append(self, tokens) -> "QueryBatch":
        cols = np.tile(np.asarray(tokens, dtype=np.int64), (self.batch_size, 1))
        return QueryBatch(np.concatenate([self.ids, cols], 1), np.concatenate([self.valid, np.ones_like(cols, bool)], 1))


@dataclass
class QueryState:
    """A question already run through the model (shared prefix for several branches)."""

    hidden: Tensor
    cache: KVCache


@dataclass
class LatentResult:
    hidden: Tensor  # (B, c+1, d): outputs at n+1 .. n+c+1 of the final iteration
    cache: KVCache  # query + <bot> + latent block (final iteration only)
    history: list[Tensor] = field(default_factory=list)  # per iteration, t = 1 ..
    prefix_cache: KVCache | None = None  # query + <bot>


def encode_query(weights: TransformerWeights, batch: QueryBatch) -> QueryState:
    out = forward(weights, embed_tokens(weights, batch.ids), valid=batch.valid)
    return QueryState(out.hidden, out.cache)


def _token_block(weights, batch, query, tokens, keep: int = 0):
    """Forward ``tokens`` after the query, reusing ``query`` when given.

    The cache may later be truncated to drop the last ``keep`` columns.
    """
    if query is None:
        b = batch.append(tokens)
        mark = (b.ids.shape[1] - keep,)
        return forward(weights, embed_tokens(weights, b.ids), valid=b.valid, marks=mark)
    cols = np.tile(np.asarray(tokens, dtype=np.int64), (query.cache.batch_size, 1))
    mark = (query.cache.length + len(tokens) - keep,)
    return forward(weights, embed_tokens(weights, cols), query.cache, marks=mark)


def run_ccot(weights, batch: QueryBatch, c: int, specials: SpecialTokens, query: QueryState | None = None) -> LatentResult:
    """Continuous CoT: one pass over query+<bot>, then ``c`` single-position steps."""
    if c < 0:
        raise ValueError("c must be >= 0")
    out = _token_block(weights, batch, query, [specials.bot_id])
    h = out.hidden[:, -1:, :]
    prefix = out.cache
    cache = out.cache
    outs = [h]
    for _ in range(c):
        step = forward(weights, h, cache)
        h, cache = step.hidden, step.cache
        outs.append(h)
    hidden = ad.concat(outs, axis=1) if c else h
    return LatentResult(hidden, cache, [], prefix)


def pccot_first_pass(weights, batch: QueryBatch, c: int, specials: SpecialTokens, query: QueryState | None = None) -> LatentResult:
    """One pass over query + <bot> + ``c`` copies of ``<latent>``."""
    out = _token_block(weights, batch, query, [specials.bot_id] + [specials.latent_id] * c, keep=c)
    hidden = out.hidden[:, -(c + 1):, :]
    prefix = out.cache.truncate(out.cache.length - c)
    return LatentResult(hidden, out.cache, [hidden], prefix)


def jacobi_step(weights, prefix_cache: KVCache, h_prev: Tensor) -> tuple[Tensor, KVCache]:
    """Re-feed iteration-t outputs at n+1..n+c as inputs of n+2..n+c+1, all at once.

    ``h_prev`` is the full ``(B, c+1, d)`` block; the ``<bot>`` output does
    not depend on the latents and is carried over unchanged.
    """
    c = h_prev.shape[1] - 1
    if c < 1:
        raise ValueError("jacobi_step needs at least one latent token")
    if h_prev.shape[0] != prefix_cache.batch_size:
        raise ValueError(f"expected {prefix_cache.batch_size} rows of latent vectors, got {h_prev.shape[0]}")
    out = forward(weights, h_prev[:, :c, :], prefix_cache)
    return ad.concat([h_prev[:, :1, :], out.hidden], axis=1), out.cache


def jacobi_step_positionwise(weights, prefix_cache: KVCache, h_prev: Tensor, order=None) -> Tensor:
    """Evaluate every latent position on its own, in ``order``, against iteration-t inputs.

    Used to check that the batched step is a true Jacobi update.
    """
    c = h_prev.shape[1] - 1
    order = range(1, c + 1) if order is None else order
    cols = {}
    for i in order:
        out = forward(weights, h_prev[:, :i, :], prefix_cache)
        cols[i] = out.hidden[:, i - 1 : i, :]
    return ad.concat([h_prev[:, :1, :]] + [cols[i] for i in range(1, c + 1)], axis=1)


def run_pccot(
    weights,
    batch: QueryBatch,
    c: int,
    T: int,
    specials: SpecialTokens,
    query: QueryState | None = None,
    keep_history: bool = False,
    use_cache: bool = True,
) -> LatentResult:
    """First pass followed by ``T`` Jacobi steps.

    With ``use_cache=False`` every iteration recomputes the whole sequence
    instead of reusing the query prefix (same values, more work).
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    first = pccot_first_pass(weights, batch, c, specials, query)
    if c == 0:
        return first
    h, cache = first.hidden, first.cache
    history = [h] if keep_history else []
    for _ in range(T):
        if use_cache:
            h, cache = jacobi_step(weights, first.prefix_cache, h)
        else:
            h, cache = _jacobi_step_full(weights, batch, specials, h, query)
        if keep_history:
            history.append(h)
    return LatentResult(h, cache, history, first.prefix_cache)


def _jacobi_step_full(weights, batch, specials, h_prev, query):
    c = h_prev.shape[1] - 1
    if query is None:
        b = batch.append([specials.bot_id])
        x = ad.concat([embed_tokens(weights, b.ids), h_prev[:, :c, :]], axis=1)
        valid = np.concatenate([b.valid, np.ones((b.batch_size, c), bool)], 1)
        out = forward(weights, x, valid=valid)
    else:
        cols = np.full((query.cache.batch_size, 1), specials.bot_id)
        x = ad.concat([embed_tokens(weights, cols), h_prev[:, :c, :]], axis=1)
        out = forward(weights, x, query.cache)
    return out.hidden[:, -(c + 1):, :], out.cache


def run_latent(weights, batch: QueryBatch, cfg: ReasoningConfig, specials: SpecialTokens, query: QueryState | None = None, keep_history: bool = False) -> LatentResult:
    if cfg.mode == "ccot":
        return run_ccot(weights, batch, cfg.c, specials, query)
    return run_pccot(weights, batch, cfg.c, cfg.T if cfg.c else 0, specials, query, keep_history)


# -- answer ---------------------------------------------------------------


def answer_prompt_logits(weights, cache: KVCache, specials: SpecialTokens) -> tuple[Tensor, KVCache]:
    """Append <eot> and the answer prompt; logits at the last prompt token."""
    cols = np.tile(np.asarray([specials.eot_id, *specials.prompt_ids], dtype=np.int64), (cache.batch_size, 1))
    out = forward(weights, embed_tokens(weights, cols), cache)
    return lm_head(weights, out.hidden[:, -1, :]), out.cache


@dataclass
class DecodeResult:
    tokens: list[list[int]]
    truncated: list[bool]


def greedy_continue(weights, logits: np.ndarray, cache: KVCache, stop_id: int, max_len: int) -> DecodeResult:
    """Greedy autoregressive decoding from next-token ``logits`` (B, V)."""
    B = logits.shape[0]
    tokens: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with ad.no_grad():
        for step in range(max_len):
            nxt = greedy(logits)
            for r in np.flatnonzero(~done):
                if nxt[r] == stop_id:
                    done[r] = True
                else:
                    tokens[r].append(int(nxt[r]))
            if done.all() or step == max_len - 1:
                break
            out = forward(weights, embed_tokens(weights, nxt[:, None]), cache)
            cache = out.cache
            logits = lm_head(weights, out.hidden[:, -1, :]).data
    return DecodeResult(tokens, [not d for d in done])


def decode_answer(weights, cache: KVCache, specials: SpecialTokens, max_len: int) -> DecodeResult:
    """Append <eot> + answer prompt, then decode greedily until <eoa> or ``max_len`` tokens."""
    if max_len <= 0:
        return DecodeResult([[] for _ in range(cache.batch_size)], [True] * cache.batch_size)
    with ad.no_grad():
        logits, cache = answer_prompt_logits(weights, cache, specials)
    return greedy_continue(weights, logits.data, cache, specials.eoa_id, max_len)


# -- reference paths for the reductions --------------------------------------


def icot_reference_logits(weights, batch: QueryBatch, specials: SpecialTokens) -> Tensor:
    """Plain token forward over ``query <bot> <eot> prompt``; logits at the anchor."""
    b = batch.append([specials.bot_id, specials.eot_id, *specials.prompt_ids])
    out = forward(weights, embed_tokens(weights, b.ids), valid=b.valid)
    return lm_head(weights, out.hidden[:, -1, :])


def pause_reference_logits(weights, batch: QueryBatch, c: int, specials: SpecialTokens) -> Tensor:
    """Plain token forward over ``query <bot> <latent>*c <eot> prompt``."""
    b = batch.append([specials.bot_id] + [specials.latent_id] * c + [specials.eot_id, *specials.prompt_ids])
    out = forward(weights, embed_tokens(weights, b.ids), valid=b.valid)
    return lm_head(weights, out.hidden[:, -1, :])


# -- fixed-point verifier ---------------------------------------------------


@dataclass
class FixedPointReport:
    c: int
    T: int
    diffs: np.ndarray  # (c+1, T+1): max abs diff of output j at iteration t vs sequential
    tol: float

    @property
    def fixed_mask(self) -> np.ndarray:
        j = np.arange(1, self.c + 2)[:, None]
        t = np.arange(1, self.T + 2)[None, :]
        return t >= j

    @property
    def max_fixed_diff(self) -> float:
        m = self.fixed_mask
        return float(self.diffs[m].max()) if m.any() else 0.0

    @property
    def final_diff(self) -> float:
        """Max diff of the final iteration over all latent outputs."""
        return float(self.diffs[:, -1].max()) if self.diffs.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_fixed_diff <= self.tol

    def rows(self):
        for j in range(self.c + 1):
            for t in range(self.T + 1):
                yield j + 1, t + 1, float(self.diffs[j, t]), bool(t >= j)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("token,iteration,max_abs_diff,fixed_point_expected\n")
            for j, t, d, fixed in self.rows():
                f.write(f"{j},{t},{d:.17g},{int(fixed)}\n")


def check_fixed_points(weights, batch: QueryBatch, c: int, T: int, specials: SpecialTokens, tol: float = 1e-8) -> FixedPointReport:
    """Compare every Jacobi iterate against sequential continuous CoT.

    ``token`` j in the report is block index j (1 = <bot> output); the
    fixed-point claim is ``diff <= tol`` whenever ``iteration >= token``.
    """
    with ad.no_grad():
        seq = run_ccot(weights, batch, c, specials).hidden.data
        par = run_pccot(weights, batch, c, T, specials, keep_history=True)
    hist = par.history + [par.history[-1]] * (T + 1 - len(par.history))  # c=0 has nothing to iterate
    diffs = np.stack([np.abs(h.data - seq).max(axis=(0, 2)) for h in hist], axis=1)
    return FixedPointReport(c, T, diffs, tol)
