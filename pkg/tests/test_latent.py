import numpy as np
import pytest

from pccot import autodiff as ad
from pccot.latent import (
    QueryBatch,
    ReasoningConfig,
    SpecialTokens,
    answer_prompt_logits,
    check_fixed_points,
    decode_answer,
    encode_query,
    icot_reference_logits,
    jacobi_step,
    jacobi_step_positionwise,
    pause_reference_logits,
    run_ccot,
    run_latent,
    run_pccot,
)
from pccot.model import ModelConfig, TransformerWeights, count_forward_passes

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, vocab_size=64, max_positions=96)
SP = SpecialTokens(prompt_ids=(10, 11, 12))


def weights(seed=0, precision="64"):
    cfg = CFG if precision == "64" else ModelConfig(**{**CFG.__dict__, "precision": precision})
    return TransformerWeights.init(cfg, seed=seed, randomize_norms=True)


def queries(seed=0, batch=3):
    rng = np.random.default_rng(seed)
    return QueryBatch.from_lists([rng.integers(5, 64, size=n).tolist() for n in rng.integers(3, 9, size=batch)])


def test_config_invariants():
    assert ReasoningConfig("pccot", 24, 3).passes == 4
    assert ReasoningConfig("ccot", 24, 0).passes == 25
    assert ReasoningConfig.for_cell(0, 5).mode == "icot"
    assert ReasoningConfig.for_cell(4, 0).mode == "pause"
    for bad in (("pccot", 0, 1), ("icot", 2, 0), ("pause", 2, 1), ("pccot", -1, 2), ("nope", 1, 1)):
        with pytest.raises(ValueError):
            ReasoningConfig(*bad)


def test_special_tokens_distinct():
    with pytest.raises(ValueError):
        SpecialTokens(bot_id=1, latent_id=1)
    with pytest.raises(ValueError):
        SpecialTokens(prompt_ids=(1, 10))


@pytest.mark.parametrize("c", [1, 2, 4, 8])
def test_fixed_point_schedule(c):
    w = weights(c)
    rep = check_fixed_points(w, queries(c), c, c, SP)
    assert rep.max_fixed_diff <= 1e-8
    assert rep.final_diff <= 1e-8
    # iterations before the fixed point are not yet equal on random weights
    early = rep.diffs[~rep.fixed_mask]
    assert early.size == 0 or early.max() > 1e-6


def test_fixed_point_with_fewer_iterations():
    rep = check_fixed_points(weights(1), queries(1), 6, 2, SP)
    assert rep.max_fixed_diff <= 1e-8
    assert rep.diffs[-1, -1] > 1e-6  # T < c leaves the tail unconverged


def test_pass_counts():
    w, b = weights(), queries()
    with count_forward_passes() as n:
        run_pccot(w, b, 6, 3, SP)
    assert n.count == 4
    with count_forward_passes() as n:
        run_ccot(w, b, 6, SP)
    assert n.count == 7  # <bot> pass + one step per latent


def test_jacobi_step_is_order_invariant_bitwise():
    w, b = weights(2), queries(2)
    first = run_pccot(w, b, 5, 0, SP)
    batched, _ = jacobi_step(w, first.prefix_cache, first.hidden)
    order = np.random.default_rng(0).permutation(np.arange(1, 6))
    perm = jacobi_step_positionwise(w, first.prefix_cache, first.hidden, order)
    assert batched.data.tobytes() == perm.data.tobytes()


def test_cached_iterations_equal_full_recompute():
    w, b = weights(3), queries(3)
    a = run_pccot(w, b, 4, 3, SP)
    f = run_pccot(w, b, 4, 3, SP, use_cache=False)
    assert np.abs(a.hidden.data - f.hidden.data).max() <= 1e-10


def test_shared_query_prefix_gives_same_latents():
    w, b = weights(4), queries(4)
    own = run_pccot(w, b, 3, 2, SP).hidden.data
    shared = run_pccot(w, b, 3, 2, SP, encode_query(w, b)).hidden.data
    assert np.abs(own - shared).max() <= 1e-12


def test_c0_reduces_to_icot():
    w, b = weights(5), queries(5)
    got, _ = answer_prompt_logits(w, run_latent(w, b, ReasoningConfig("icot", 0, 0), SP).cache, SP)
    assert np.abs(got.data - icot_reference_logits(w, b, SP).data).max() <= 1e-10


def test_T0_reduces_to_pause_tokens():
    w, b = weights(6), queries(6)
    got, _ = answer_prompt_logits(w, run_latent(w, b, ReasoningConfig("pause", 5, 0), SP).cache, SP)
    assert np.abs(got.data - pause_reference_logits(w, b, 5, SP).data).max() <= 1e-10


def test_latent_positions_keep_fixed_indices():
    w, b = weights(7), queries(7)
    res = run_pccot(w, b, 4, 3, SP)
    assert np.array_equal(res.cache.next_position, b.valid.sum(1) + 1 + 4)


def test_decode_stops_and_flags_truncation():
    w = weights(8)
    b = queries(8)
    res = decode_answer(w, run_pccot(w, b, 2, 1, SP).cache, SP, 4)
    assert len(res.tokens) == 3
    for toks, trunc in zip(res.tokens, res.truncated):
        assert SP.eoa_id not in toks
        assert len(toks) <= 4
        if trunc:
            assert len(toks) == 4
    empty = decode_answer(w, run_pccot(w, b, 2, 1, SP).cache, SP, 0)
    assert empty.tokens == [[], [], []] and all(empty.truncated)


def test_float32_fixed_point_is_close():
    rep = check_fixed_points(weights(9, "32"), queries(9), 4, 4, SP, tol=1e-4)
    assert rep.passed


def test_gradients_flow_through_feedback_edges():
    w, b = weights(10), queries(10)
    res = run_pccot(w, b, 3, 2, SP)
    loss = ad.total(ad.mul(res.hidden, res.hidden))
    ad.backward(loss, w.parameters())
    assert np.abs(w["wte"].grad[SP.latent_id]).max() > 0
    assert np.abs(w["h.0.mlp.w_fc"].grad).max() > 0
