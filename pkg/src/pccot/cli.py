"""Command-line entry point: ``pccot <subcommand> [flags]``.

Every run writes its files under ``--out`` together with ``manifest.json``
(effective config, input and output hashes).  ``--manifest`` replays a
previous run from its manifest.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, bench, plots
from . import autodiff as ad
from .config import ConfigError, RunConfig, format_config, int_list, load_config
from .data import Tokenizer, answer_share, generate, read_dataset, write_dataset
from .latent import (
    QueryBatch,
    ReasoningConfig,
    SpecialTokens,
    answer_prompt_logits,
    check_fixed_points,
    icot_reference_logits,
    pause_reference_logits,
    run_latent,
)
from .model import CheckpointError, ModelConfig, TransformerWeights, restore, snapshot
from .training import EVAL_MODES, evaluate, init_model, train

log = logging.getLogger("pccot")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CHECKPOINT = 3
EXIT_CONFIG = 4
EXIT_CHECK_FAILED = 5

MANIFEST = "manifest.json"
COMMANDS = ("gen-data", "train", "eval", "verify", "bench", "analyze", "sweep")


class UsageError(Exception):
    pass


class MissingCheckpoint(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pccot", description="Parallel continuous chain-of-thought toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--out", help="output directory (default runs/<command>)")
        s.add_argument("--manifest", help="replay the run recorded in this manifest")
        s.add_argument("--c", type=int)
        s.add_argument("--T", type=int)
        s.add_argument("--mode", choices=("icot", "pause", "ccot", "pccot"))
        s.add_argument("--seed", type=int)
        s.add_argument("--precision", choices=("32", "64"))
        s.add_argument("--checkpoint")
        s.add_argument("--data", dest="data_dir", help="directory with train/dev/test.jsonl")
        s.add_argument("--count", type=int, help="number of training examples to generate")
        s.add_argument("--epochs", type=int)
        s.add_argument("--eval-mode", dest="eval_mode", choices=EVAL_MODES)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    return p


# -- helpers -----------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return f"{v:.9g}" if isinstance(v, float) else str(v)


class Run:
    """Output directory bookkeeping for one subcommand."""

    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.outputs: list[Path] = []
        self.volatile: list[Path] = []  # wall-clock dependent files, hashed but not reproducible
        self.inputs: dict[str, str] = {}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str, volatile: bool = False) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        (self.volatile if volatile else self.outputs).append(p)
        return p

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def manifest(self) -> dict:
        rel = lambda p: p.relative_to(self.out).as_posix()  # noqa: E731
        return {
            "format": 1,
            "command": self.command,
            "config": self.cfg.as_dict(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {rel(p): sha256_file(p) for p in sorted(set(self.outputs))},
            "volatile": {rel(p): sha256_file(p) for p in sorted(set(self.volatile))},
        }

    def finish(self) -> Path:
        m = self.out / MANIFEST
        with open(m, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.manifest(), f, indent=2, sort_keys=True)
            f.write("\n")
        return m


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _splits(run: Run, tok: Tokenizer) -> dict:
    cfg = run.cfg
    if cfg.data_dir:
        d = Path(cfg.data_dir)
        splits = read_dataset(d)
        if "train" not in splits:
            raise FileNotFoundError(f"no train.jsonl in {d}")
        for name in sorted(splits):
            run.add_input(d / f"{name}.jsonl")
        return splits
    return generate(cfg.data())


def _load_weights(run: Run, tok: Tokenizer, required: bool) -> TransformerWeights:
    cfg = run.cfg
    if cfg.checkpoint:
        p = Path(cfg.checkpoint)
        if not p.is_file():
            raise MissingCheckpoint(f"checkpoint not found: {p}")
        run.add_input(p)
        w = restore(p)
        return w if w.config.precision == cfg.precision else w.astype(cfg.precision)
    if required:
        raise MissingCheckpoint("this command needs --checkpoint")
    return TransformerWeights.init(cfg.model(tok.vocab_size), seed=cfg.seed)


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(run: Run) -> dict:
    splits = generate(run.cfg.data())
    paths = write_dataset(splits, run.out)
    for p in paths.values():
        run.outputs.append(p)
    rows = [[name, len(ex), _fmt(answer_share(ex)), _fmt(float(np.mean([len(e.question) for e in ex]))),
             _fmt(float(np.mean([e.steps for e in ex])))] for name, ex in splits.items()]
    _write_csv(run.path("stats.csv"), ["split", "examples", "max_answer_share", "mean_question_chars", "mean_steps"], rows)
    return {"examples": {k: len(v) for k, v in splits.items()}}


def cmd_train(run: Run) -> dict:
    cfg = run.cfg
    tok = Tokenizer()
    splits = _splits(run, tok)
    rc = cfg.reasoning()
    tc = cfg.train()
    w = init_model(cfg.model(tok.vocab_size), tok, tc)
    metrics = run.path("metrics.csv")
    res = train(w, splits["train"], splits.get("dev", []), rc, tc, cfg.loss_weights(), tok, log_path=metrics)
    snapshot(w, run.path("checkpoint.bin"))
    _write_csv(run.path("dev_curve.csv"), ["evaluation", "dev_accuracy"],
               [[i, _fmt(a)] for i, a in enumerate(res.dev_curve)])
    out = {"best_dev": res.best_dev, "best_epoch": res.best_epoch, "steps": res.steps}
    if splits.get("test"):
        out["test_accuracy"] = evaluate(w, splits["test"], rc, tok, cfg.eval_mode, cfg.eval_batch).accuracy
    _write_csv(run.path("summary.csv"), list(out), [[_fmt(v) for v in out.values()]])
    with open(metrics, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if rows:
        steps = [int(r["step"]) for r in rows]
        series = {k: [float(r[k]) for r in rows] for k in ("teacher_ce", "student_ce", "distill_l1", "total")}
        plots.training_curve(steps, series, run.path("training_curve.png"))
    return out


def cmd_eval(run: Run) -> dict:
    cfg = run.cfg
    tok = Tokenizer()
    w = _load_weights(run, tok, required=True)
    examples = _splits(run, tok).get(cfg.eval_split)
    if not examples:
        raise ValueError(f"split {cfg.eval_split!r} is empty or missing")
    res = evaluate(w, examples, cfg.reasoning(), tok, cfg.eval_mode, cfg.eval_batch)
    _write_csv(run.path("predictions.csv"), ["question", "gold", "predicted", "correct", "truncated"],
               [[r.question, r.gold, r.predicted, int(r.correct), int(r.truncated)] for r in res.records])
    out = {"split": cfg.eval_split, "eval_mode": cfg.eval_mode, "accuracy": res.accuracy, "examples": len(res.records)}
    _write_csv(run.path("summary.csv"), list(out), [[_fmt(v) for v in out.values()]])
    return out


def _random_batch(seed: int, vocab: int, batch: int = 3) -> QueryBatch:
    rng = np.random.default_rng([seed, 1])
    lens = rng.integers(3, 9, size=batch)
    return QueryBatch.from_lists([rng.integers(5, vocab, size=n).tolist() for n in lens])


def cmd_verify(run: Run) -> dict:
    """Jacobi iterates vs sequential latents on random models, plus the c=0 / T=0 reductions."""
    cfg = run.cfg
    c, T = cfg.c, cfg.T
    mc = ModelConfig(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ff, 64, cfg.max_positions, cfg.precision)
    sp = SpecialTokens(prompt_ids=(10, 11, 12))
    rows, worst, red = [], 0.0, 0.0
    for m in range(cfg.verify_models):
        w = TransformerWeights.init(mc, seed=cfg.seed + m, randomize_norms=True)
        batch = _random_batch(cfg.seed + m, mc.vocab_size)
        rep = check_fixed_points(w, batch, c, T, sp, cfg.verify_tol)
        worst = max(worst, rep.max_fixed_diff)
        rows += [[m, j, t, f"{d:.17g}", int(fixed)] for j, t, d, fixed in rep.rows()]
        with ad.no_grad():
            for rc, ref in ((ReasoningConfig("icot", 0, 0), icot_reference_logits(w, batch, sp)),
                            (ReasoningConfig("pause", c, 0), pause_reference_logits(w, batch, c, sp))):
                got, _ = answer_prompt_logits(w, run_latent(w, batch, rc, sp).cache, sp)
                red = max(red, float(np.abs(got.data - ref.data).max()))
    _write_csv(run.path("verify.csv"), ["model", "token", "iteration", "max_abs_diff", "fixed_point_expected"], rows)
    passed = worst <= cfg.verify_tol
    line = f"max fixed-point diff {worst:.3e} {'PASS' if passed else 'FAIL'} (tol {cfg.verify_tol:g}); reductions {red:.3e}"
    with open(run.path("verify.txt"), "w", encoding="utf-8") as f:
        f.write(line + "\n")
    print(line)
    if not passed:
        run.finish()
        raise CheckFailed(line)
    return {"max_fixed_diff": worst, "reduction_diff": red, "passed": passed}


def cmd_bench(run: Run) -> dict:
    cfg = run.cfg
    tok = Tokenizer()
    w = _load_weights(run, tok, required=False)
    Ts = int_list(cfg.bench_Ts) or [cfg.T]
    recs = bench.bench_T_curve(w, cfg.c, Ts, cfg.bench_batch, reps=cfg.bench_reps, warmup=cfg.bench_warmup,
                               specials=SpecialTokens.from_tokenizer(tok), query_len=cfg.bench_query_len, seed=cfg.seed)
    bench.write_records(recs, run.path("bench_passes.csv"), bench.PASS_FIELDS)
    bench.write_records(recs, run.path("bench_timings.csv", volatile=True), bench.TIME_FIELDS)
    plots.bench_bars(recs, run.path("bench.png", volatile=True))
    return {"ratios": {r.T: round(r.ratio, 4) for r in recs}, "passes": {r.T: [r.ccot_passes, r.pccot_passes] for r in recs}}


def cmd_analyze(run: Run) -> dict:
    cfg = run.cfg
    tok = Tokenizer()
    w = _load_weights(run, tok, required=False)
    sp = SpecialTokens.from_tokenizer(tok)
    splits = _splits(run, tok)
    examples = splits.get(cfg.eval_split) or splits["train"]
    batch = QueryBatch.from_lists([tok.encode(e.question) for e in examples[: cfg.analysis_batch]], tok.pad_id)
    out = {}
    if cfg.c >= 1:
        rep = analysis.mse_per_iteration(w, batch, cfg.c, cfg.T_max, sp)
        rep.to_csv(run.path("mse.csv"))
        curve = [(r.iteration, r.mse) for r in rep.rows if not r.empty]
        if curve:
            plots.mse_curve(*zip(*curve), run.path("mse.png"))
        out["mse_decreasing"] = rep.decreasing()
        out["excluded_max_diff"] = max(r.excluded_max_diff for r in rep.rows)
    if cfg.c >= 2:
        sim = analysis.similarity_matrix(w, batch, cfg.c, cfg.T, sp, "ccot" if cfg.mode == "ccot" else "pccot")
        labels = [f"latent{i}" for i in range(1, cfg.c + 1)]
        analysis.write_matrix_csv(sim, labels, run.path("similarity.csv"))
        plots.heatmap(sim, run.path("similarity.png"), "pairwise MSE of latent thoughts", labels)
        first, last = analysis.quartile_similarity(sim)
        out["similarity_first_quartile"], out["similarity_last_quartile"] = first, last
    dump = analysis.attention_dump(w, examples[0], cfg.reasoning(), tok)
    for p in dump.write(run.out / "attention"):
        run.outputs.append(p)
    for layer, m in enumerate(dump.maps):
        plots.heatmap(m.mean(axis=0), run.path(f"attention/attention_layer{layer}.png"),
                      f"layer {layer} attention (head mean)", dump.labels, cmap="magma")
    if cfg.checkpoint:
        pert = analysis.perturb_experiment(w, examples, cfg.reasoning(), tok, cfg.perturb_seed)
        _write_csv(run.path("embedding.csv"), ["condition", "accuracy"],
                   [["trained", _fmt(pert.baseline)], ["perturbed_latent", _fmt(pert.changed)]])
        out["accuracy"], out["perturbed_accuracy"] = pert.baseline, pert.changed
    return out


def cmd_sweep(run: Run) -> dict:
    cfg = run.cfg
    tok = Tokenizer()
    splits = _splits(run, tok)
    cells = [(c, T) for c in int_list(cfg.sweep_cs) for T in int_list(cfg.sweep_Ts) if not (c == 0 and T > 0)]
    res = analysis.sweep(cells, splits, cfg.model(tok.vocab_size), cfg.train(), cfg.loss_weights(), tok,
                         seeds=int_list(cfg.sweep_seeds))
    res.to_csv(run.path("sweep.csv"))
    res.summary_to_csv(run.path("sweep_summary.csv"))
    plots.sweep_plot(res.summary(), run.path("sweep.png"))
    return {"cells": len(res.cells()), "runs": len(res.rows)}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
}

_FLAG_KEYS = ("c", "T", "mode", "seed", "precision", "checkpoint", "data_dir", "count", "epochs", "eval_mode")


def resolve(args) -> tuple[str, RunConfig, Path]:
    if args.manifest:
        with open(args.manifest, encoding="utf-8") as f:
            m = json.load(f)
        if m.get("command") != args.command:
            raise UsageError(f"manifest records command {m.get('command')!r}, not {args.command!r}")
        try:
            cfg = replace(RunConfig(), **m["config"])
        except TypeError as e:
            raise ConfigError(f"manifest config: {e}") from None
        for path, digest in m.get("inputs", {}).items():
            if not Path(path).is_file():
                if path == cfg.checkpoint:
                    raise MissingCheckpoint(f"checkpoint not found: {path}")
                raise FileNotFoundError(f"manifest input missing: {path}")
            if sha256_file(path) != digest:
                raise ValueError(f"manifest input changed since the recorded run: {path}")
    else:
        overrides = {k: getattr(args, k) for k in _FLAG_KEYS}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        cfg = load_config(args.config, overrides)
    out = Path(args.out or f"runs/{args.command}")
    return args.command, cfg, out


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        command, cfg, out = resolve(args)
        run = Run(command, cfg, out)
        with open(run.path("config.txt"), "w", encoding="utf-8") as f:
            f.write(format_config(cfg))
        result = HANDLERS[command](run)
        run.finish()
        _emit({"command": command, "status": "ok", "out": str(out), **result})
        return EXIT_OK
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    except ConfigError as e:
        return _fail("config", e, EXIT_CONFIG)
    except (MissingCheckpoint, CheckpointError) as e:
        return _fail("checkpoint", e, EXIT_CHECKPOINT)
    except CheckFailed as e:
        return _fail("check_failed", e, EXIT_CHECK_FAILED)
    except Exception as e:  # noqa: BLE001 - every failure ends in one structured line
        return _fail(type(e).__name__, e, EXIT_ERROR)


def _fail(kind: str, err: Exception, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(err), "exit_code": code}, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
