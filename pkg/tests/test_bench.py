import csv

import numpy as np
import pytest

from pccot import autodiff as ad
from pccot import bench
from pccot.latent import SpecialTokens, run_ccot, run_pccot
from pccot.model import ModelConfig, TransformerWeights, embed_tokens, forward

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, vocab_size=64, max_positions=96)
SP = SpecialTokens()


def prefix(w, batch=3, length=6):
    q = bench.random_queries(batch, length, 64, seed=1)
    ids = np.concatenate([q.ids, np.full((batch, 1), SP.bot_id)], axis=1)
    out = forward(w, embed_tokens(w, ids))
    return q, out.cache, out.hidden[:, -1:, :]


def test_blocks_match_library_paths():
    w = TransformerWeights.init(CFG, seed=0, randomize_norms=True)
    q, pre, bot = prefix(w)
    with ad.no_grad():
        seq = bench.ccot_block(w, pre, bot, 5).data
        par = bench.pccot_block(w, pre, bot, 5, 5, SP).data
        lib_seq = run_ccot(w, q, 5, SP).hidden.data
        lib_par = run_pccot(w, q, 5, 2, SP).hidden.data
        par2 = bench.pccot_block(w, pre, bot, 5, 2, SP).data
    assert np.abs(seq[:, -1] - lib_seq[:, -1]).max() <= 1e-10
    assert np.abs(par - lib_seq).max() <= 1e-8  # T = c reaches the sequential values
    assert np.abs(par2 - lib_par).max() <= 1e-10


@pytest.mark.parametrize("T", [0, 1, 3])
def test_pass_counts_exact(T):
    w = TransformerWeights.init(CFG, seed=0)
    rec = bench.bench_latent_block(w, 6, T, 2, reps=1, warmup=0, query_len=4, min_sample=0.0)
    assert rec.ccot_passes == 6
    assert rec.pccot_passes == T + 1
    assert rec.ccot_seconds > 0 and rec.pccot_seconds > 0


def test_T_curve_pass_counts_grow(tmp_path):
    w = TransformerWeights.init(CFG, seed=0)
    recs = bench.bench_T_curve(w, 4, [1, 2, 3], 2, reps=1, warmup=0, query_len=4, min_sample=0.0)
    assert [r.pccot_passes for r in recs] == [2, 3, 4]
    bench.write_records(recs, tmp_path / "p.csv", bench.PASS_FIELDS)
    with open(tmp_path / "p.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == bench.PASS_FIELDS and rows[2]["pccot_passes"] == "4"


def test_calibration_reaches_minimum_sample():
    n = bench._calibrate(lambda: sum(range(1000)), 0.005)
    assert n >= 1


def test_rejects_bad_arguments():
    w = TransformerWeights.init(CFG, seed=0)
    with pytest.raises(ValueError):
        bench.bench_latent_block(w, 0, 1, 2)
