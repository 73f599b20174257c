"""Wall-clock comparison of the latent block: sequential continuous CoT vs Jacobi iterations.

Only the latent region is timed.  The query and ``<bot>`` are encoded once
into a shared prefix cache and answer decoding is left out.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .latent import QueryBatch, SpecialTokens, jacobi_step
from .model import TransformerWeights, count_forward_passes, embed_tokens, forward


def ccot_block(weights, prefix, bot_hidden, c: int):
    """``c`` dependent single-position steps, each fed the previous output."""
    h, cache = bot_hidden, prefix
    for _ in range(c):
        out = forward(weights, h, cache)
        h, cache = out.hidden, out.cache
    return h


def pccot_block(weights, prefix, bot_hidden, c: int, T: int, specials: SpecialTokens):
    """One pass over ``c`` ``<latent>`` tokens, then ``T`` Jacobi steps over all of them."""
    B = bot_hidden.shape[0]
    out = forward(weights, embed_tokens(weights, np.full((B, c), specials.latent_id)), prefix)
    h = ad.concat([bot_hidden, out.hidden], axis=1)
    for _ in range(T):
        h, _ = jacobi_step(weights, prefix, h)
    return h


def random_queries(batch: int, length: int, vocab: int, seed: int = 0, low: int = 5) -> QueryBatch:
    rng = np.random.default_rng(seed)
    return QueryBatch.from_lists(rng.integers(low, vocab, size=(batch, length)).tolist())


@dataclass
class BenchRecord:
    c: int
    T: int
    batch: int
    query_len: int
    warmup: int
    reps: int
    inner: int  # calls per timed sample
    ccot_passes: int
    pccot_passes: int
    ccot_seconds: float  # median per call
    pccot_seconds: float

    @property
    def ratio(self) -> float:
        return self.pccot_seconds / self.ccot_seconds

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        return d


def _calibrate(fn, min_sample: float) -> int:
    """Calls per timed sample so a sample spans at least ``min_sample`` seconds."""
    res = time.get_clock_info("perf_counter").resolution
    target = max(min_sample, 1000 * res)
    n = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        if time.perf_counter() - t0 >= target or n >= 1 << 16:
            return n
        n *= 2


def _median_time(fn, reps: int, inner: int) -> float:
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return statistics.median(samples)


def bench_latent_block(weights: TransformerWeights, c: int, T: int, batch: int, reps: int = 7, warmup: int = 2,
                       specials: SpecialTokens | None = None, query_len: int = 32, seed: int = 0,
                       min_sample: float = 0.02) -> BenchRecord:
    """Median wall time of both latent-block strategies at the same ``c``."""
    if c < 1 or T < 0 or batch < 1 or reps < 1:
        raise ValueError("need c >= 1, T >= 0, batch >= 1, reps >= 1")
    specials = specials or SpecialTokens()
    queries = random_queries(batch, query_len, weights.config.vocab_size, seed)
    with ad.no_grad():
        ids = np.concatenate([queries.ids, np.full((batch, 1), specials.bot_id)], axis=1)
        pre = forward(weights, embed_tokens(weights, ids))
        prefix, bot = pre.cache, pre.hidden[:, -1:, :]

        def seq():
            return ccot_block(weights, prefix, bot, c)

        def par():
            return pccot_block(weights, prefix, bot, c, T, specials)

        with count_forward_passes() as n_seq:
            seq()
        with count_forward_passes() as n_par:
            par()
        for _ in range(warmup):
            seq()
            par()
        inner = max(_calibrate(seq, min_sample), _calibrate(par, min_sample))
        # interleave so drifts in machine load hit both sides alike
        t_seq, t_par = [], []
        for _ in range(reps):
            t_seq.append(_median_time(seq, 1, inner))
            t_par.append(_median_time(par, 1, inner))
    return BenchRecord(c, T, batch, query_len, warmup, reps, inner, n_seq.count, n_par.count,
                       statistics.median(t_seq), statistics.median(t_par))


def bench_T_curve(weights, c: int, Ts, batch: int, **kw) -> list[BenchRecord]:
    return [bench_latent_block(weights, c, T, batch, **kw) for T in Ts]


PASS_FIELDS = ["c", "T", "batch", "ccot_passes", "pccot_passes"]
TIME_FIELDS = ["c", "T", "batch", "query_len", "warmup", "reps", "inner", "ccot_seconds", "pccot_seconds", "ratio"]


def write_records(records: list[BenchRecord], path, fields) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for r in records:
            d = r.to_dict()
            w.writerow([f"{d[k]:.9g}" if isinstance(d[k], float) else d[k] for k in fields])
