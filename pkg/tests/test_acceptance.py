"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criterion trains nine models (three methods x three seeds) and
takes most of the suite's wall time; the analysis criterion reuses its
seed-0 PCCoT model.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from pccot import analysis as an
from pccot import autodiff as ad
from pccot import bench, cli
from pccot import training as tr
from pccot.data import DataConfig, Tokenizer, generate
from pccot.latent import (
    QueryBatch,
    ReasoningConfig,
    SpecialTokens,
    answer_prompt_logits,
    check_fixed_points,
    icot_reference_logits,
    jacobi_step,
    jacobi_step_positionwise,
    pause_reference_logits,
    run_latent,
    run_pccot,
)
from pccot.model import ModelConfig, TransformerWeights, embed_tokens, forward

from conftest import record

SMALL = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, vocab_size=64, max_positions=96)
SP = SpecialTokens(prompt_ids=(10, 11, 12))
TOK = Tokenizer()

# training criterion
TRAIN_DATA = DataConfig(seed=0, count=10_000, dev_count=500, test_count=1_000, min_steps=2, max_steps=3)
TRAIN_MODEL = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=128, vocab_size=TOK.vocab_size, max_positions=128,
                          precision="32")
TRAIN_CFG = tr.TrainConfig(lr=3e-3, batch_size=32, epochs=20)
METHODS = {
    "icot": ReasoningConfig("icot", 0, 0),
    "ccot": ReasoningConfig("ccot", 8, 0),
    "pccot": ReasoningConfig("pccot", 8, 3),
}
SEEDS = (0, 1, 2)
BUDGET_SECONDS = 2 * 3600


def random_queries(seed, batch=3, vocab=64):
    rng = np.random.default_rng(seed)
    return QueryBatch.from_lists([rng.integers(5, vocab, size=n).tolist() for n in rng.integers(3, 9, size=batch)])


def random_model(seed, cfg=SMALL):
    return TransformerWeights.init(cfg, seed=seed, randomize_norms=True)


@pytest.fixture(scope="module")
def fixed_point_reports():
    t0 = time.perf_counter()
    reports = {}
    for m in range(20):
        w, b = random_model(m), random_queries(m)
        for c in (1, 2, 4, 8):
            reports[m, c] = check_fixed_points(w, b, c, c, SP)
    return reports, time.perf_counter() - t0


def test_criterion_1_fixed_point_equivalence(fixed_point_reports):
    reports, seconds = fixed_point_reports
    worst = max(r.final_diff for r in reports.values())
    ok = worst <= 1e-8 and seconds < 60
    assert record(1, "PCCoT with T=c equals sequential continuous CoT", ok,
                  f"max |diff| {worst:.2e} (tol 1e-8) over 20 models x c in {{1,2,4,8}}; {seconds:.1f}s (limit 60s)")


def test_criterion_2_per_token_schedule(fixed_point_reports):
    reports, _ = fixed_point_reports
    worst = max(r.max_fixed_diff for r in reports.values())
    early = np.concatenate([r.diffs[~r.fixed_mask] for r in reports.values()])
    ok = worst <= 1e-8
    assert record(2, "token i is fixed from iteration i on", ok,
                  f"max diff at t>=i {worst:.2e} (tol 1e-8); before the fixed point: min {early.min():.2e}, "
                  f"median {np.median(early):.2e} (reported only)")


def test_criterion_3_mode_reductions():
    worst_icot = worst_pause = 0.0
    for m in range(5):
        w, b = random_model(100 + m), random_queries(100 + m)
        with ad.no_grad():
            got, _ = answer_prompt_logits(w, run_latent(w, b, ReasoningConfig("icot", 0, 0), SP).cache, SP)
            worst_icot = max(worst_icot, float(np.abs(got.data - icot_reference_logits(w, b, SP).data).max()))
            for c in (1, 4):
                got, _ = answer_prompt_logits(w, run_latent(w, b, ReasoningConfig("pause", c, 0), SP).cache, SP)
                ref = pause_reference_logits(w, b, c, SP).data
                worst_pause = max(worst_pause, float(np.abs(got.data - ref).max()))
    ok = worst_icot <= 1e-10 and worst_pause <= 1e-10
    assert record(3, "c=0 is iCoT and T=0 is pause tokens", ok,
                  f"c=0 logit diff {worst_icot:.2e}, T=0 logit diff {worst_pause:.2e} (tol 1e-10)")


def test_criterion_4_student_gradient():
    from pccot.data import ArithmeticExample

    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, vocab_size=TOK.vocab_size, max_positions=128)
    w = TransformerWeights.init(cfg, seed=5, randomize_norms=True)
    examples = [tr.TrainExample.from_arithmetic(e, TOK) for e in (
        ArithmeticExample("a=3. b=4. What is a*b?", "<<3*4=12>>", "12"),
        ArithmeticExample("a=5. b=2. c=7. What is a-b+c?", "<<5-2=3>><<3+7=10>>", "10"),
    )]
    rc = ReasoningConfig("pccot", 3, 2)
    sp = SpecialTokens.from_tokenizer(TOK)
    t0 = time.perf_counter()
    errs = ad.grad_check_many(lambda: tr.student_loss(w, examples, rc, sp).ce, w.parameters(),
                              eps=1e-3, n_coords=32, order=4)
    seconds = time.perf_counter() - t0
    worst = max(errs)
    ok = worst <= 1e-5 and seconds < 120
    assert record(4, "student loss gradient vs central differences", ok,
                  f"max rel err {worst:.2e} (tol 1e-5) over {len(errs)} groups x >=32 coords; {seconds:.1f}s (limit 120s)")


def test_criterion_5_cache_and_jacobi_invariance():
    worst = 0.0
    bitwise = True
    for m in range(5):
        w = random_model(200 + m)
        ids = np.random.default_rng(m).integers(5, 64, size=(2, 12))
        with ad.no_grad():
            full = forward(w, embed_tokens(w, ids)).hidden.data
            pre = forward(w, embed_tokens(w, ids[:, :7]))
            inc = forward(w, embed_tokens(w, ids[:, 7:]), pre.cache).hidden.data
            worst = max(worst, float(np.abs(full[:, 7:] - inc).max()), float(np.abs(full[:, :7] - pre.hidden.data).max()))
            b = random_queries(200 + m)
            first = run_pccot(w, b, 6, 0, SP)
            batched, _ = jacobi_step(w, first.prefix_cache, first.hidden)
            for k in range(3):
                order = np.random.default_rng([m, k]).permutation(np.arange(1, 7))
                perm = jacobi_step_positionwise(w, first.prefix_cache, first.hidden, order)
                bitwise &= batched.data.tobytes() == perm.data.tobytes()
    ok = worst <= 1e-10 and bitwise
    assert record(5, "KV cache and Jacobi order invariance", ok,
                  f"cache vs recompute {worst:.2e} (tol 1e-10); permuted Jacobi bitwise equal: {bitwise}")


def test_criterion_6_latency():
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=128, vocab_size=TOK.vocab_size, max_positions=128,
                      precision="32")
    w = TransformerWeights.init(cfg, seed=0)
    rec = bench.bench_latent_block(w, 24, 3, 64, reps=9, warmup=2, specials=SpecialTokens.from_tokenizer(TOK))
    passes = rec.ccot_passes == 24 and rec.pccot_passes == 4
    ok = passes and rec.ratio <= 0.6
    assert record(6, "latent-block latency, c=24 T=3 batch 64", ok,
                  f"pccot {rec.pccot_seconds * 1e3:.1f}ms vs sequential {rec.ccot_seconds * 1e3:.1f}ms, "
                  f"ratio {rec.ratio:.3f} (limit 0.6); dependent passes {rec.pccot_passes} vs {rec.ccot_passes}")


# -- training ----------------------------------------------------------------


@pytest.fixture(scope="session")
def trained():
    splits = generate(TRAIN_DATA)
    runs = {}
    t0 = time.perf_counter()
    for name, rc in METHODS.items():
        for seed in SEEDS:
            tc = replace(TRAIN_CFG, seed=seed)
            w = tr.init_model(TRAIN_MODEL, TOK, tc)
            res = tr.train(w, splits["train"], splits["dev"], rc, tc, tr.LossWeights(), TOK)
            acc = tr.evaluate(w, splits["test"], rc, TOK).accuracy
            runs[name, seed] = (w, acc, res)
            print(f"trained {name} seed {seed}: test {acc:.3f}, best dev {res.best_dev:.3f} at epoch {res.best_epoch}")
    return splits, runs, time.perf_counter() - t0


def test_criterion_7_training_behaviour(trained):
    splits, runs, seconds = trained
    stats = {}
    for name in METHODS:
        accs = [runs[name, s][1] for s in SEEDS]
        stats[name] = (float(np.mean(accs)), an.population_std(accs))
    p, i, c = stats["pccot"][0], stats["icot"][0], stats["ccot"][0]
    a_ok, b_ok, t_ok = p > i, p >= 0.9 * c, seconds < BUDGET_SECONDS
    table = ", ".join(f"{k} {m * 100:.1f}+-{s * 100:.1f}%" for k, (m, s) in stats.items())
    ok = a_ok and b_ok and t_ok
    assert record(7, "training: PCCoT > iCoT and >= 0.9 x continuous CoT", ok,
                  f"{table}; (a) {a_ok} (b) {b_ok}; {seconds / 60:.1f} min (limit 120)")


def test_criterion_8_analysis(trained):
    # (a) exclusion, (b) random-init convergence over 24 iterations
    w = TransformerWeights.init(ModelConfig(vocab_size=TOK.vocab_size, precision="64"), seed=0)
    sp = SpecialTokens.from_tokenizer(TOK)
    splits, runs, _ = trained
    qs = QueryBatch.from_lists([TOK.encode(e.question) for e in splits["test"][:32]], TOK.pad_id)
    rep = an.mse_per_iteration(w, qs, 24, 24, sp)
    excl = max(r.excluded_max_diff for r in rep.rows)
    curve = rep.curve
    # (c) attention rows
    model, acc, _ = runs["pccot", 0]
    dump = an.attention_dump(model, splits["test"][0], METHODS["pccot"], TOK)
    row_err = max(float(np.abs(m.sum(-1) - 1).max()) for m in dump.maps)
    # (d) perturbed latent embedding
    pert = an.perturb_experiment(model, splits["test"], METHODS["pccot"], TOK, seed=0)
    a_ok, b_ok, c_ok = excl <= 1e-10, rep.decreasing(), row_err <= 1e-6
    d_ok = pert.changed < 0.1 * pert.baseline
    ok = a_ok and b_ok and c_ok and d_ok
    assert record(8, "analysis suite", ok,
                  f"(a) excluded diff {excl:.1e} (b) mse {curve[0]:.2e} -> {curve[-1]:.2e} decreasing={b_ok} "
                  f"(c) row-sum err {row_err:.1e} (d) accuracy {pert.baseline:.3f} -> {pert.changed:.3f} perturbed")


# -- determinism ---------------------------------------------------------------

DET_CFG = """\
count = 40
dev_count = 8
test_count = 8
epochs = 1
batch_size = 16
d_model = 16
d_ff = 32
c = 3
T = 2
T_max = 4
precision = 64
bench_reps = 1
bench_warmup = 0
bench_batch = 2
bench_query_len = 4
bench_Ts = 1,2
verify_models = 2
analysis_batch = 4
sweep_cs = 0,2
sweep_Ts = 0,1
sweep_seeds = 0,1
"""


def _outputs(run_dir):
    m = json.loads((run_dir / cli.MANIFEST).read_text())
    files = {name: (run_dir / name).read_bytes() for name in m["outputs"]}
    m.pop("volatile")
    return files, m


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "det.cfg"
    cfg.write_text(DET_CFG)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "ck")]) == 0
    ck = str(tmp_path / "ck" / "checkpoint.bin")
    extra = {"eval": ["--checkpoint", ck], "analyze": ["--checkpoint", ck]}
    diffs = []
    for command in cli.COMMANDS:
        first = tmp_path / f"{command}-1"
        argv = [command, "--config", str(cfg), "--out", str(first)] + extra.get(command, [])
        assert cli.main(argv) == 0, command
        second = tmp_path / f"{command}-2"
        assert cli.main([command, "--manifest", str(first / cli.MANIFEST), "--out", str(second)]) == 0, command
        (f1, m1), (f2, m2) = _outputs(first), _outputs(second)
        if f1 != f2 or m1 != m2:
            diffs.append(command)
    ok = not diffs
    assert record(9, "byte-identical reruns from the manifest (64-bit)", ok,
                  f"{len(cli.COMMANDS)} subcommands; differing: {diffs or 'none'}")
