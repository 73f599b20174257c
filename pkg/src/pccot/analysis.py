"""Diagnostics over the latent block: convergence, token similarity, attention maps,
latent-embedding ablations and (c, T) sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import ArithmeticExample, Tokenizer
from .latent import QueryBatch, ReasoningConfig, SpecialTokens, run_latent, run_pccot
from .model import TransformerWeights, embed_tokens, forward

# -- convergence over Jacobi iterations ---------------------------------------


@dataclass
class MSERow:
    iteration: int  # transition h^(t) -> h^(t+1)
    included: int  # block positions still moving (index > t)
    mse: float  # nan when nothing is left to measure
    excluded_max_diff: float  # max |h^(t+1) - h^(t)| over the excluded positions

    @property
    def empty(self) -> bool:
        return self.included == 0


@dataclass
class MSEReport:
    c: int
    rows: list[MSERow]

    @property
    def curve(self) -> np.ndarray:
        return np.array([r.mse for r in self.rows if not r.empty])

    def decreasing(self) -> bool:
        """Least-squares slope of log-MSE is negative and the last value is below the first."""
        y = self.curve
        y = y[y > 0]
        if len(y) < 2:
            return False
        slope = np.polyfit(np.arange(len(y)), np.log(y), 1)[0]
        return bool(slope < 0 and y[-1] < y[0])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iteration", "included_tokens", "mse", "excluded_max_abs_diff", "empty"])
            for r in self.rows:
                w.writerow([r.iteration, r.included, f"{r.mse:.9g}", f"{r.excluded_max_diff:.9g}", int(r.empty)])


def mse_per_iteration(weights: TransformerWeights, batch: QueryBatch, c: int, T_max: int, specials: SpecialTokens) -> MSEReport:
    """MSE between consecutive Jacobi iterates of the latent block.

    Block position ``j`` (1 = ``<bot>`` output, ``j = i + 1`` for latent ``i``)
    is final from iteration ``j`` on, so the transition out of iteration
    ``t`` only measures positions ``j > t``.  The excluded positions are
    still diffed and reported, which checks the exclusion rule.
    """
    if T_max < 1:
        raise ValueError("T_max must be >= 1")
    if c < 1:
        raise ValueError("c must be >= 1")
    with ad.no_grad():
        res = run_pccot(weights, batch, c, T_max, specials, keep_history=True)
    hist = [h.data for h in res.history]
    rows = []
    for t in range(1, T_max + 1):
        diff = hist[t] - hist[t - 1]  # (B, c+1, d); block index j = column + 1
        moving = diff[:, t:, :]
        fixed = diff[:, :t, :]
        n = moving.shape[1]
        mse = float(np.mean(moving * moving)) if n else float("nan")
        ex = float(np.abs(fixed).max()) if fixed.size else 0.0
        rows.append(MSERow(t, n, mse, ex))
    return MSEReport(c, rows)


# -- similarity between latent tokens ----------------------------------------


def similarity_matrix(weights: TransformerWeights, batch: QueryBatch, c: int, T: int, specials: SpecialTokens,
                      mode: str = "pccot") -> np.ndarray:
    """``c x c`` pairwise MSE between the final latent thought vectors (batch-averaged).

    Latent ``i`` is the block output at index ``i`` (the vector fed into the
    next position), so ``<bot>``'s output is latent 1.
    """
    if c < 2:
        raise ValueError("similarity needs c >= 2")
    cfg = ReasoningConfig(mode, c, T if mode != "ccot" else 0)
    with ad.no_grad():
        h = run_latent(weights, batch, cfg, specials).hidden.data[:, :c, :]
    sim = np.zeros((c, c))
    for i in range(c):
        for j in range(i + 1, c):
            d = h[:, i, :] - h[:, j, :]
            sim[i, j] = sim[j, i] = float(np.mean(d * d))
    return sim


def quartile_similarity(sim: np.ndarray) -> tuple[float, float]:
    """Mean off-diagonal MSE among the first and among the last quarter of tokens."""
    c = sim.shape[0]
    q = max(2, c // 4)

    def block_mean(a):
        n = a.shape[0]
        return float(a.sum() / (n * (n - 1)))

    return block_mean(sim[:q, :q]), block_mean(sim[c - q :, c - q :])


def write_matrix_csv(matrix: np.ndarray, labels, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([""] + list(labels))
        for lab, row in zip(labels, matrix):
            w.writerow([lab] + [f"{v:.9g}" for v in row])


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    labels = rows[0][1:]
    if [r[0] for r in rows[1:]] != labels:
        raise ValueError(f"{path}: row labels differ from column labels")
    return labels, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


# -- attention maps ------------------------------------------------------------


@dataclass
class AttentionDump:
    labels: list[str]
    maps: list[np.ndarray]  # per layer, (heads, L, L) for a single example
    latent_span: tuple[int, int]  # [start, stop) of the <bot> + latent columns

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for layer, m in enumerate(self.maps):
            for head in range(m.shape[0]):
                p = out_dir / f"attention_layer{layer}_head{head}.csv"
                write_matrix_csv(m[head], self.labels, p)
                paths.append(p)
        return paths


def _label(tok: Tokenizer, i: int) -> str:
    s = tok.itos[i]
    return s if s != " " else "<sp>"


def latent_block_inputs(weights, batch: QueryBatch, cfg: ReasoningConfig, specials: SpecialTokens) -> ad.Tensor:
    """Input vectors of the latent positions during the final pass over the block."""
    if cfg.c == 0:
        return None
    if cfg.mode == "ccot":
        return run_latent(weights, batch, cfg, specials).hidden[:, : cfg.c, :]
    if cfg.T == 0:
        return embed_tokens(weights, np.full((batch.batch_size, cfg.c), specials.latent_id))
    res = run_pccot(weights, batch, cfg.c, cfg.T, specials, keep_history=True)
    return res.history[-2][:, : cfg.c, :]


def attention_dump(weights, example: ArithmeticExample, cfg: ReasoningConfig, tok: Tokenizer) -> AttentionDump:
    """Attention of one example's final pass: question, latent block, answer prompt and gold answer.

    The whole sequence is replayed in one forward with the final iteration's
    latent inputs, which yields the same keys/values as the cached run.
    """
    specials = SpecialTokens.from_tokenizer(tok)
    q = tok.encode(example.question)
    batch = QueryBatch.from_lists([q], tok.pad_id)
    tail = [tok.eot_id] + tok.prompt_ids + tok.encode(example.answer)
    with ad.no_grad():
        head = embed_tokens(weights, np.array([q + [tok.bot_id]]))
        parts = [head]
        lat = latent_block_inputs(weights, batch, cfg, specials)
        if lat is not None:
            parts.append(lat)
        parts.append(embed_tokens(weights, np.array([tail])))
        out = forward(weights, ad.concat(parts, axis=1), return_attention=True)
    labels = [_label(tok, i) for i in q] + ["<bot>"] + [f"<latent{i}>" for i in range(1, cfg.c + 1)]
    labels += [_label(tok, i) for i in tail]
    labels = [f"{k}:{lab}" for k, lab in enumerate(labels)]  # position prefix keeps labels unique
    maps = [a[0] for a in out.attention]
    return AttentionDump(labels, maps, (len(q), len(q) + 1 + cfg.c))


# -- latent embedding experiments ---------------------------------------------


def perturb_latent_embedding(weights: TransformerWeights, latent_id: int, seed: int = 0) -> TransformerWeights:
    """Copy of ``weights`` with ``E[<latent>]`` replaced by a random direction of the same norm."""
    w = weights.copy()
    row = w["wte"].data[latent_id]
    v = np.random.default_rng(seed).standard_normal(row.shape)
    v *= np.linalg.norm(row) / np.linalg.norm(v)
    w["wte"].data[latent_id] = v.astype(row.dtype)
    return w


@dataclass
class EmbeddingReport:
    mode: str
    baseline: float
    changed: float

    @property
    def ratio(self) -> float:
        return self.changed / self.baseline if self.baseline else float("nan")


def perturb_experiment(weights, examples, cfg: ReasoningConfig, tok: Tokenizer, seed: int = 0) -> EmbeddingReport:
    from .training import evaluate

    base = evaluate(weights, examples, cfg, tok).accuracy
    pert = evaluate(perturb_latent_embedding(weights, tok.latent_id, seed), examples, cfg, tok).accuracy
    return EmbeddingReport("perturb-latent", base, pert)


def freeze_experiment(model_cfg, train_set, dev_set, test_set, cfg: ReasoningConfig, tc, lw, tok: Tokenizer) -> EmbeddingReport:
    """Train twice, with a trainable and a frozen ``<latent>`` embedding."""
    from dataclasses import replace

    from .training import evaluate, init_model, train

    accs = []
    for freeze in (False, True):
        t = replace(tc, freeze_latent=freeze)
        w = init_model(model_cfg, tok, t)
        train(w, train_set, dev_set, cfg, t, lw, tok)
        accs.append(evaluate(w, test_set, cfg, tok).accuracy)
    return EmbeddingReport("freeze-latent", accs[0], accs[1])


# -- sweeps ------------------------------------------------------------------


def cell_label(cfg: ReasoningConfig) -> str:
    """Name of the method a cell reduces to."""
    if cfg.mode == "ccot":
        return "ccot"
    if cfg.c == 0:
        return "icot"
    if cfg.T == 0:
        return "pause"
    if cfg.T >= cfg.c:
        return "pccot(=ccot)"
    return "pccot"


@dataclass
class SweepRow:
    cfg: ReasoningConfig
    seed: int
    accuracy: float


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def cells(self) -> list[ReasoningConfig]:
        out = []
        for r in self.rows:
            if r.cfg not in out:
                out.append(r.cfg)
        return out

    def accuracies(self, cfg: ReasoningConfig) -> list[float]:
        return [r.accuracy for r in self.rows if r.cfg == cfg]

    def summary(self) -> list[dict]:
        out = []
        for cfg in self.cells():
            accs = self.accuracies(cfg)
            out.append({"mode": cfg.mode, "c": cfg.c, "T": cfg.T, "label": cell_label(cfg), "seeds": len(accs),
                        "mean": float(np.mean(accs)), "std": population_std(accs)})
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["c", "T", "seed", "accuracy", "mode"])
            for r in self.rows:
                w.writerow([r.cfg.c, r.cfg.T, r.seed, f"{r.accuracy:.9g}", r.cfg.mode])

    def summary_to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["mode", "c", "T", "label", "seeds", "mean_accuracy", "std_accuracy_population"])
            for r in self.summary():
                w.writerow([r["mode"], r["c"], r["T"], r["label"], r["seeds"], f"{r['mean']:.9g}", f"{r['std']:.9g}"])


def sweep(cells, splits, model_cfg, tc, lw, tok: Tokenizer, seeds=(0, 1, 2), on_run=None) -> SweepResult:
    """Train and test every cell (``ReasoningConfig`` or ``(c, T)`` pair) once per seed."""
    from dataclasses import replace

    from .training import evaluate, init_model, train

    res = SweepResult()
    cfgs = [cell if isinstance(cell, ReasoningConfig) else ReasoningConfig.for_cell(*cell) for cell in cells]
    for cfg in cfgs:
        for seed in seeds:
            t = replace(tc, seed=seed)
            w = init_model(model_cfg, tok, t)
            train(w, splits["train"], splits.get("dev", []), cfg, t, lw, tok)
            acc = evaluate(w, splits["test"], cfg, tok).accuracy
            res.rows.append(SweepRow(cfg, seed, acc))
            if on_run is not None:
                on_run(cfg, seed, w, acc)
    return res


def population_std(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(math.sqrt(((v - v.mean()) ** 2).mean()))
