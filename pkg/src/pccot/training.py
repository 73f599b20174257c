"""CODI self-distillation: teacher (explicit CoT) and student (latent CoT) share one model.

The total objective is ``alpha * teacher_ce + beta * student_ce + gamma * l1``
where the L1 term compares next-token distributions at the last token of
the answer prompt.  The teacher distribution is a constant for the
distillation term.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ArithmeticExample, Tokenizer
from .latent import (
    QueryBatch,
    QueryState,
    ReasoningConfig,
    SpecialTokens,
    decode_answer,
    encode_query,
    greedy_continue,
    run_latent,
)
from .model import TransformerWeights, embed_tokens, forward, lm_head

log = logging.getLogger(__name__)

EVAL_MODES = ("latent", "teacher-cot", "teacher-gold-cot")


class NonFiniteLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainExample:
    question: tuple[int, ...]
    cot: tuple[int, ...]
    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    eoa: int

    def __post_init__(self):
        if not self.question or not self.answer or not self.prompt:
            raise ValueError("question, answer prompt and answer must be non-empty")

    @property
    def anchor(self) -> int:
        return self.prompt[-1]

    @classmethod
    def from_arithmetic(cls, ex: ArithmeticExample, tok: Tokenizer) -> "TrainExample":
        return cls(tuple(tok.encode(ex.question)), tuple(tok.encode(ex.cot)), tuple(tok.prompt_ids),
                   tuple(tok.encode(ex.answer)), tok.eoa_id)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    batch_size: int = 128
    epochs: int = 40
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    ce_reduction: str = "mean"  # per-example token mean within each task's target span
    freeze_latent: bool = False
    eval_every: int = 1  # epochs between dev evaluations (0 = never)

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.ce_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown ce_reduction {self.ce_reduction!r}")


@dataclass
class LossBreakdown:
    teacher: float
    student: float
    distill: float
    total: float

    @classmethod
    def combine(cls, w: LossWeights, teacher: float, student: float, distill: float) -> "LossBreakdown":
        return cls(teacher, student, distill, w.alpha * teacher + w.beta * student + w.gamma * distill)


@dataclass
class TaskLoss:
    ce: Tensor
    anchor_dist: Tensor  # (B, V) next-token distribution at the answer-prompt anchor


# -- batching ---------------------------------------------------------------


def _right_pad(seqs, pad: int):
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), n), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        valid[r, : len(s)] = True
    return ids, valid


def _span_weights(counts: np.ndarray, reduction: str, dtype) -> np.ndarray:
    B = len(counts)
    if reduction == "mean":
        return (1.0 / (counts * B)).astype(dtype)
    return np.full(len(counts), 1.0 / B, dtype=dtype)


def query_batch(examples: list[TrainExample], pad_id: int) -> QueryBatch:
    return QueryBatch.from_lists([e.question for e in examples], pad_id)


# -- losses -----------------------------------------------------------------


def teacher_loss(weights, examples: list[TrainExample], specials: SpecialTokens, query: QueryState | None = None,
                 reduction: str = "mean") -> TaskLoss:
    """CE over gold CoT and answer tokens of ``question cot prompt answer <eoa>``.

    The CoT span ends with its terminator, the first prompt token, just as the
    answer span ends with <eoa>; without it the model never learns to stop
    reasoning on its own.
    """
    if any(not e.cot for e in examples):
        raise ValueError("teacher task needs a gold chain of thought for every example")
    if query is None:
        query = encode_query(weights, query_batch(examples, specials.pad_id))
    streams = [e.cot + e.prompt + e.answer + (e.eoa,) for e in examples]
    ids, valid = _right_pad([s[:-1] for s in streams], specials.pad_id)
    out = forward(weights, embed_tokens(weights, ids), query.cache, valid)
    # prediction m comes from column m-1 of the block; m = 0 from the last question token
    hidden = ad.concat([query.hidden[:, -1:, :], out.hidden], axis=1)
    rows, cols, targets, owner = [], [], [], []
    anchors = []
    for r, (e, s) in enumerate(zip(examples, streams)):
        span = list(range(len(e.cot) + 1)) + list(range(len(e.cot) + len(e.prompt), len(s)))
        rows += [r] * len(span)
        cols += span
        targets += [s[m] for m in span]
        owner += [r] * len(span)
        anchors.append(len(e.cot) + len(e.prompt))
    counts = np.bincount(owner, minlength=len(examples))
    w = _span_weights(counts, reduction, weights.config.dtype)[owner]
    picked = hidden[np.asarray(rows), np.asarray(cols)]
    ce = ad.cross_entropy(lm_head(weights, picked), np.asarray(targets), w)
    anchor_logits = lm_head(weights, hidden[np.arange(len(examples)), np.asarray(anchors)])
    return TaskLoss(ce, ad.softmax(anchor_logits))


def student_loss(weights, examples: list[TrainExample], cfg: ReasoningConfig, specials: SpecialTokens,
                 query: QueryState | None = None, reduction: str = "mean") -> TaskLoss:
    """Answer-only CE of ``question <bot> latents <eot> prompt answer <eoa>``.

    Gradients flow through every unrolled latent pass.
    """
    batch = query_batch(examples, specials.pad_id)
    latent = run_latent(weights, batch, cfg, specials, query)
    P = len(specials.prompt_ids)
    if any(e.prompt != specials.prompt_ids for e in examples):
        raise ValueError("examples use a different answer prompt than the special-token config")
    streams = [e.prompt + e.answer + (e.eoa,) for e in examples]
    ids, valid = _right_pad([(specials.eot_id,) + s[:-1] for s in streams], specials.pad_id)
    out = forward(weights, embed_tokens(weights, ids), latent.cache, valid)
    rows, cols, targets, owner = [], [], [], []
    for r, s in enumerate(streams):
        span = range(P, len(s))
        rows += [r] * len(span)
        cols += list(span)
        targets += [s[m] for m in span]
        owner += [r] * len(span)
    counts = np.bincount(owner, minlength=len(examples))
    w = _span_weights(counts, reduction, weights.config.dtype)[owner]
    picked = out.hidden[np.asarray(rows), np.asarray(cols)]
    ce = ad.cross_entropy(lm_head(weights, picked), np.asarray(targets), w)
    anchor_logits = lm_head(weights, out.hidden[:, P, :])
    return TaskLoss(ce, ad.softmax(anchor_logits))


def distill_loss(teacher_dist: Tensor, student_dist: Tensor, tol: float = 1e-4) -> Tensor:
    """``sum_v |p_teacher - p_student|`` averaged over rows; the teacher side is detached."""
    for name, t in (("teacher", teacher_dist), ("student", student_dist)):
        sums = t.data.sum(axis=-1)
        if np.abs(sums - 1).max() > tol or t.data.min() < -tol:
            raise ValueError(f"{name} distribution is not normalized (row sums {sums.min():.6g}..{sums.max():.6g})")
    return ad.l1_distance(teacher_dist.detach(), student_dist)


def codi_loss(weights, examples, cfg: ReasoningConfig, specials: SpecialTokens, lw: LossWeights,
              reduction: str = "mean") -> tuple[Tensor, LossBreakdown]:
    """Weighted CODI objective; the question prefix is computed once and shared."""
    query = encode_query(weights, query_batch(examples, specials.pad_id))
    teacher = teacher_loss(weights, examples, specials, query, reduction)
    parts = [teacher.ce * lw.alpha] if lw.alpha else []
    s_val = d_val = 0.0
    if lw.beta or lw.gamma:
        student = student_loss(weights, examples, cfg, specials, query, reduction)
        dist = distill_loss(teacher.anchor_dist, student.anchor_dist)
        s_val, d_val = student.ce.item(), dist.item()
        if lw.beta:
            parts.append(student.ce * lw.beta)
        if lw.gamma:
            parts.append(dist * lw.gamma)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total, LossBreakdown.combine(lw, teacher.ce.item(), s_val, d_val)


# -- optimizer --------------------------------------------------------------


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero (or constant after warmup)."""
    warmup = int(math.ceil(cfg.warmup_ratio * total_steps))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    if cfg.schedule == "constant":
        return cfg.lr
    progress = (step - warmup) / max(1, total_steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    """Decoupled weight decay Adam; 1-D parameters (biases, norms) are not decayed."""

    def __init__(self, weights: TransformerWeights, cfg: TrainConfig):
        self.weights = weights
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in weights.named_parameters()}
        self.v = {k: np.zeros_like(p.data) for k, p in weights.named_parameters()}
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1 - cfg.beta1 ** self.t
        bc2 = 1 - cfg.beta2 ** self.t
        frozen = sorted(self.weights.frozen_rows)
        for name, p in self.weights.named_parameters():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            if p.ndim > 1 and cfg.weight_decay:
                update = update + cfg.weight_decay * p.data
            if name == "wte" and frozen:
                update[frozen] = 0.0
            p.data -= (lr * update).astype(p.dtype, copy=False)


def grad_norm(weights: TransformerWeights) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in weights.parameters() if p.grad is not None))


def clip_gradients(weights: TransformerWeights, max_norm: float) -> float:
    norm = grad_norm(weights)
    if norm > max_norm:
        k = max_norm / (norm + 1e-6)
        for p in weights.parameters():
            if p.grad is not None:
                p.grad *= p.dtype.type(k)
    return norm


def apply_frozen_rows(weights: TransformerWeights) -> None:
    if weights.frozen_rows and weights["wte"].grad is not None:
        weights["wte"].grad[sorted(weights.frozen_rows)] = 0.0


@dataclass
class StepResult:
    losses: LossBreakdown
    grad_norm: float
    lr: float


def train_step(weights, examples, cfg: ReasoningConfig, specials: SpecialTokens, lw: LossWeights,
               tc: TrainConfig, opt: AdamW, lr: float) -> StepResult:
    weights.zero_grad()
    total, parts = codi_loss(weights, examples, cfg, specials, lw, tc.ce_reduction)
    if not math.isfinite(total.item()):
        raise NonFiniteLoss(f"non-finite loss {parts}")
    ad.backward(total, weights.parameters())
    apply_frozen_rows(weights)
    norm = clip_gradients(weights, tc.clip_norm)
    if not math.isfinite(norm):
        weights.zero_grad()
        raise NonFiniteLoss(f"non-finite gradient norm at loss {parts}")
    opt.step(lr)
    weights.zero_grad()
    return StepResult(parts, norm, lr)


# -- evaluation -------------------------------------------------------------


@dataclass
class EvalRecord:
    question: str
    gold: str
    predicted: str
    correct: bool
    truncated: bool


@dataclass
class EvalResult:
    accuracy: float
    records: list[EvalRecord] = field(default_factory=list)


def _continue_context(weights, contexts: list[list[int]], tok: Tokenizer, stop_id: int, max_len: int):
    batch = QueryBatch.from_lists(contexts, tok.pad_id)
    out = forward(weights, embed_tokens(weights, batch.ids), valid=batch.valid)
    logits = lm_head(weights, out.hidden[:, -1, :]).data
    return greedy_continue(weights, logits, out.cache, stop_id, max_len)


def evaluate(weights, examples: list[ArithmeticExample], cfg: ReasoningConfig, tok: Tokenizer,
             mode: str = "latent", batch_size: int = 256, max_answer: int = 6, max_cot: int = 48) -> EvalResult:
    """Greedy-decode every example and score exact answer matches.

    ``latent`` decodes through the latent block; ``teacher-cot`` lets the
    shared weights write their own chain of thought first; ``teacher-gold-cot``
    forces the gold chain and decodes only the answer.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"eval mode must be one of {EVAL_MODES}")
    specials = SpecialTokens.from_tokenizer(tok)
    records = []
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            qs = [tok.encode(e.question) for e in chunk]
            if mode == "latent":
                batch = QueryBatch.from_lists(qs, tok.pad_id)
                lat = run_latent(weights, batch, cfg, specials)
                res = decode_answer(weights, lat.cache, specials, max_answer)
                preds = [(tok.decode(t), tr) for t, tr in zip(res.tokens, res.truncated)]
            elif mode == "teacher-gold-cot":
                ctx = [q + tok.encode(e.cot) + tok.prompt_ids for q, e in zip(qs, chunk)]
                res = _continue_context(weights, ctx, tok, tok.eoa_id, max_answer)
                preds = [(tok.decode(t), tr) for t, tr in zip(res.tokens, res.truncated)]
            else:
                # reason until the CoT terminator, then answer after the full prompt
                cot = _continue_context(weights, qs, tok, tok.prompt_ids[0], max_cot)
                ctx = [q + t + tok.prompt_ids for q, t in zip(qs, cot.tokens)]
                res = _continue_context(weights, ctx, tok, tok.eoa_id, max_answer)
                preds = [(tok.decode(t), tr or ct) for t, tr, ct in zip(res.tokens, res.truncated, cot.truncated)]
            for e, (p, tr) in zip(chunk, preds):
                records.append(EvalRecord(e.question, e.answer, p, p == e.answer and not tr, tr))
    acc = sum(r.correct for r in records) / max(1, len(records))
    return EvalResult(acc, records)


# -- training loop ----------------------------------------------------------

LOG_FIELDS = ["step", "epoch", "lr", "teacher_ce", "student_ce", "distill_l1", "total", "grad_norm"]


@dataclass
class TrainResult:
    weights: TransformerWeights
    best_dev: float
    best_epoch: int
    dev_curve: list[float]
    steps: int


def init_model(model_cfg, tok: Tokenizer, tc: TrainConfig) -> TransformerWeights:
    w = TransformerWeights.init(model_cfg, seed=tc.seed)
    if tc.freeze_latent:
        w.frozen_rows = frozenset({tok.latent_id})
    return w


def train(weights: TransformerWeights, train_set: list[ArithmeticExample], dev_set: list[ArithmeticExample],
          cfg: ReasoningConfig, tc: TrainConfig, lw: LossWeights, tok: Tokenizer,
          log_path=None, select_best: bool = True) -> TrainResult:
    """Full training run; returns the best-by-dev-accuracy weights when ``select_best``."""
    specials = SpecialTokens.from_tokenizer(tok)
    examples = [TrainExample.from_arithmetic(e, tok) for e in train_set]
    steps_per_epoch = math.ceil(len(examples) / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    opt = AdamW(weights, tc)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="\n", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    best_acc, best_epoch, best_state = -1.0, -1, None
    curve = []
    step = 0
    try:
        for epoch in range(tc.epochs):
            order = np.random.default_rng([tc.seed, epoch]).permutation(len(examples))
            for b in range(steps_per_epoch):
                chunk = [examples[i] for i in order[b * tc.batch_size : (b + 1) * tc.batch_size]]
                res = train_step(weights, chunk, cfg, specials, lw, tc, opt, lr_at(step, total_steps, tc))
                if writer is not None:
                    L = res.losses
                    writer.writerow([step, epoch, f"{res.lr:.9g}", f"{L.teacher:.9g}", f"{L.student:.9g}",
                                     f"{L.distill:.9g}", f"{L.total:.9g}", f"{res.grad_norm:.9g}"])
                step += 1
            last = epoch == tc.epochs - 1
            if dev_set and tc.eval_every and ((epoch + 1) % tc.eval_every == 0 or last):
                acc = evaluate(weights, dev_set, cfg, tok).accuracy
                curve.append(acc)
                log.info("epoch %d dev accuracy %.4f", epoch, acc)
                if acc > best_acc:
                    best_acc, best_epoch = acc, epoch
                    best_state = {k: p.data.copy() for k, p in weights.named_parameters()}
    finally:
        if fh is not None:
            fh.close()
    if select_best and best_state is not None:
        for k, p in weights.named_parameters():
            p.data[...] = best_state[k]
    return TrainResult(weights, best_acc, best_epoch, curve, step)


def train_config_dict(tc: TrainConfig) -> dict:
    return asdict(tc)
