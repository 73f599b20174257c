"""Synthetic multi-step arithmetic word problems and a character tokenizer.

Problems look like ``a=3. b=4. c=5. What is a*b+c?`` with an equation-only
chain of thought ``<<3*4=12>><<12+5=17>>`` and answer ``17``.  Operations
are applied left to right; parentheses appear where ordinary precedence
would otherwise change the meaning.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

ANSWER_PROMPT = "The answer is:"
SPECIAL_TOKENS = ("<pad>", "<bot>", "<latent>", "<eot>", "<eoa>")
_CHARS = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ .,:;?!=+-*/<>()"
VARIABLES = "abcdefg"


class UnknownCharacter(ValueError):
    def __init__(self, char: str, offset: int):
        self.char = char
        self.offset = offset
        super().__init__(f"character {char!r} at offset {offset} is not in the vocabulary")


class VocabularyOverflow(ValueError):
    pass


class Tokenizer:
    """Fixed character vocabulary; special tokens occupy the first ids."""

    def __init__(self):
        self.itos = list(SPECIAL_TOKENS) + list(_CHARS)
        self.stoi = {c: i for i, c in enumerate(_CHARS, start=len(SPECIAL_TOKENS))}

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    pad_id = 0
    bot_id = 1
    latent_id = 2
    eot_id = 3
    eoa_id = 4

    def encode(self, text: str) -> list[int]:
        out = []
        for i, ch in enumerate(text):
            try:
                out.append(self.stoi[ch])
            except KeyError:
                raise UnknownCharacter(ch, i) from None
        return out

    def decode(self, ids) -> str:
        return "".join(self.itos[int(i)] for i in ids)

    def decode_answer(self, ids) -> str:
        """Decode up to (not including) the first end-of-answer marker."""
        out = []
        for i in ids:
            if int(i) == self.eoa_id:
                break
            out.append(self.itos[int(i)])
        return "".join(out)

    @property
    def prompt_ids(self) -> list[int]:
        return self.encode(ANSWER_PROMPT)

    @property
    def anchor_id(self) -> int:
        return self.prompt_ids[-1]


@dataclass(frozen=True)
class ArithmeticExample:
    question: str
    cot: str
    answer: str

    @property
    def steps(self) -> int:
        return self.cot.count("<<")

    def to_json(self) -> str:
        return json.dumps({"question": self.question, "cot": self.cot, "answer": self.answer}, sort_keys=True)


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    count: int = 1000
    dev_count: int = 500
    test_count: int = 1000
    min_steps: int = 2
    max_steps: int = 3
    min_operand: int = 1
    max_operand: int = 9
    max_value: int = 99
    max_digits: int = 4


_EQ = re.compile(r"<<(\d+)([+\-*])(\d+)=(\d+)>>")
_OPS = {"+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b}


def evaluate_cot(cot: str) -> list[tuple[int, str, int, int]]:
    """Parse equations; raise if the chain is malformed or any equation is wrong."""
    eqs = [(int(a), op, int(b), int(r)) for a, op, b, r in _EQ.findall(cot)]
    if not eqs or "".join(f"<<{a}{op}{b}={r}>>" for a, op, b, r in eqs) != cot:
        raise ValueError(f"malformed chain of thought {cot!r}")
    for a, op, b, r in eqs:
        if _OPS[op](a, b) != r:
            raise ValueError(f"wrong equation {a}{op}{b}={r}")
    return eqs


def check_example(ex: ArithmeticExample) -> None:
    """Independent re-evaluation: equations valid, chained, and match the question."""
    eqs = evaluate_cot(ex.cot)
    for (_, _, _, r), (a, _, _, _) in zip(eqs, eqs[1:]):
        if a != r:
            raise ValueError(f"equation chain broken in {ex.cot!r}")
    if str(eqs[-1][3]) != ex.answer:
        raise ValueError(f"answer {ex.answer!r} does not match chain result {eqs[-1][3]}")
    defs = dict(re.findall(r"([a-g])=(\d+)\.", ex.question))
    m = re.search(r"What is (.*)\?$", ex.question)
    if m is None:
        raise ValueError(f"malformed question {ex.question!r}")
    expr = m.group(1)
    for var, val in defs.items():
        expr = expr.replace(var, val)
    if not re.fullmatch(r"[\d+\-*()]+", expr):
        raise ValueError(f"unresolved variables in {ex.question!r}")
    # the expression is built only from digits, + - * and parentheses
    if eval(expr, {"__builtins__": {}}) != int(ex.answer):  # noqa: S307
        raise ValueError(f"question evaluates differently from answer in {ex.question!r}")


def make_example(rng: np.random.Generator, steps: int, cfg: DataConfig) -> ArithmeticExample:
    lo, hi = cfg.min_operand, cfg.max_operand
    values = [int(rng.integers(lo, hi + 1))]
    current = values[0]
    expr, prev_op = VARIABLES[0], None
    cot = []
    for k in range(1, steps + 1):
        b = int(rng.integers(lo, hi + 1))
        ops = [op for op in "+-*" if 0 <= _OPS[op](current, b) <= cfg.max_value]
        if not ops:
            raise ValueError(f"no operation keeps {current} and {b} within [0, {cfg.max_value}]")
        op = ops[int(rng.integers(len(ops)))]
        result = _OPS[op](current, b)
        var = VARIABLES[k]
        if op == "*" and prev_op in ("+", "-"):
            expr = f"({expr})*{var}"
        else:
            expr = f"{expr}{op}{var}"
        cot.append(f"<<{current}{op}{b}={result}>>")
        values.append(b)
        current, prev_op = result, op
    for v in values + [current]:
        if len(str(abs(v))) > cfg.max_digits:
            raise VocabularyOverflow(f"value {v} exceeds {cfg.max_digits} digits")
    defs = " ".join(f"{VARIABLES[i]}={v}." for i, v in enumerate(values))
    return ArithmeticExample(f"{defs} What is {expr}?", "".join(cot), str(current))


def generate(cfg: DataConfig) -> dict[str, list[ArithmeticExample]]:
    """Deterministic train/dev/test splits, disjoint by question text.

    Example ``i`` is drawn from its own RNG stream ``(seed, i)``; duplicates
    of an earlier question are skipped.
    """
    if not (1 <= cfg.min_steps <= cfg.max_steps <= 6):
        raise ValueError("step range must lie within [1, 6]")
    if max(len(str(cfg.max_operand)), len(str(cfg.max_value))) > cfg.max_digits:
        raise VocabularyOverflow(f"operands/results beyond {cfg.max_digits} digits")
    need = cfg.count + cfg.dev_count + cfg.test_count
    seen: set[str] = set()
    pool: list[ArithmeticExample] = []
    i = 0
    limit = 50 * need + 1000
    while len(pool) < need:
        if i >= limit:
            raise ValueError(f"could only find {len(pool)} distinct questions for {need} requested")
        rng = np.random.default_rng([cfg.seed, i])
        steps = int(rng.integers(cfg.min_steps, cfg.max_steps + 1))
        ex = make_example(rng, steps, cfg)
        i += 1
        if ex.question in seen:
            continue
        seen.add(ex.question)
        pool.append(ex)
    a, b = cfg.count, cfg.count + cfg.dev_count
    return {"train": pool[:a], "dev": pool[a:b], "test": pool[b:]}


def answer_share(examples: list[ArithmeticExample]) -> float:
    """Fraction of the split taken by its most common answer."""
    if not examples:
        return 0.0
    return Counter(e.answer for e in examples).most_common(1)[0][1] / len(examples)


def write_split(examples: list[ArithmeticExample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(ex.to_json() + "\n")


def read_split(path) -> list[ArithmeticExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.append(ArithmeticExample(rec["question"], rec["cot"], rec["answer"]))
    return out


def write_dataset(splits: dict[str, list[ArithmeticExample]], out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, examples in splits.items():
        paths[name] = out_dir / f"{name}.jsonl"
        write_split(examples, paths[name])
    return paths


def read_dataset(data_dir) -> dict[str, list[ArithmeticExample]]:
    data_dir = Path(data_dir)
    return {name: read_split(data_dir / f"{name}.jsonl") for name in ("train", "dev", "test") if (data_dir / f"{name}.jsonl").exists()}


def config_dict(cfg: DataConfig) -> dict:
    return asdict(cfg)
