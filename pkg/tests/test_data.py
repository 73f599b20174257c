import json
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pccot.data import (
    ANSWER_PROMPT,
    SPECIAL_TOKENS,
    ArithmeticExample,
    DataConfig,
    Tokenizer,
    UnknownCharacter,
    VocabularyOverflow,
    answer_share,
    check_example,
    evaluate_cot,
    generate,
    make_example,
    read_dataset,
    write_dataset,
)

TOK = Tokenizer()


def test_single_step_example_oracle():
    ex = ArithmeticExample("a=3. b=4. What is a*b?", "<<3*4=12>>", "12")
    check_example(ex)
    assert ex.steps == 1


def test_generated_single_step_has_expected_shape():
    ex = make_example(np.random.default_rng(5), 1, DataConfig())
    m = re.fullmatch(r"a=(\d+)\. b=(\d+)\. What is a([+\-*])b\?", ex.question)
    assert m is not None
    a, b, op = m.groups()
    assert ex.cot == f"<<{a}{op}{b}={ex.answer}>>"
    assert {"+": int(a) + int(b), "-": int(a) - int(b), "*": int(a) * int(b)}[op] == int(ex.answer)


def test_chained_steps_consume_previous_result():
    ex = make_example(np.random.default_rng(1), 2, DataConfig())
    eqs = evaluate_cot(ex.cot)
    assert len(eqs) == 2 and eqs[1][0] == eqs[0][3]
    check_example(ex)


def test_checker_rejects_wrong_equation():
    with pytest.raises(ValueError):
        check_example(ArithmeticExample("a=3. b=4. What is a*b?", "<<3*4=13>>", "13"))
    with pytest.raises(ValueError):
        check_example(ArithmeticExample("a=3. b=4. What is a+b?", "<<3*4=12>>", "12"))


def test_every_generated_example_passes_reevaluation():
    splits = generate(DataConfig(count=600, dev_count=100, test_count=100, min_steps=1, max_steps=4))
    for ex in sum(splits.values(), []):
        check_example(ex)


def test_splits_disjoint_and_sized():
    splits = generate(DataConfig(count=300, dev_count=50, test_count=70))
    assert [len(splits[k]) for k in ("train", "dev", "test")] == [300, 50, 70]
    qs = [set(e.question for e in splits[k]) for k in ("train", "dev", "test")]
    assert not (qs[0] & qs[1] or qs[0] & qs[2] or qs[1] & qs[2])


def test_answer_distribution_not_degenerate():
    splits = generate(DataConfig(count=2000, dev_count=500, test_count=500))
    for ex in splits.values():
        assert answer_share(ex) <= 0.20


def test_dataset_files_byte_identical(tmp_path):
    cfg = DataConfig(seed=7, count=100, dev_count=10, test_count=10)
    write_dataset(generate(cfg), tmp_path / "a")
    write_dataset(generate(cfg), tmp_path / "b")
    for name in ("train", "dev", "test"):
        assert (tmp_path / "a" / f"{name}.jsonl").read_bytes() == (tmp_path / "b" / f"{name}.jsonl").read_bytes()
    back = read_dataset(tmp_path / "a")
    assert back["train"] == generate(cfg)["train"]
    rec = json.loads((tmp_path / "a" / "dev.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"question", "cot", "answer"}


def test_different_seeds_differ():
    a = generate(DataConfig(seed=0, count=50, dev_count=5, test_count=5))
    b = generate(DataConfig(seed=1, count=50, dev_count=5, test_count=5))
    assert a["train"] != b["train"]


def test_step_range_validated():
    with pytest.raises(ValueError):
        generate(DataConfig(min_steps=0))
    with pytest.raises(ValueError):
        generate(DataConfig(max_steps=7))


def test_vocabulary_overflow():
    with pytest.raises(VocabularyOverflow):
        generate(DataConfig(max_value=99999))


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="0123456789abcXYZ .,:;?!=+-*/<>()", max_size=40))
def test_round_trip(s):
    ids = TOK.encode(s)
    assert TOK.decode(ids) == s
    assert all(i >= len(SPECIAL_TOKENS) for i in ids)


def test_round_trip_on_corpus():
    for ex in generate(DataConfig(count=200, dev_count=5, test_count=5))["train"]:
        for s in (ex.question, ex.cot, ex.answer):
            assert TOK.decode(TOK.encode(s)) == s


def test_unknown_character_reports_offset():
    with pytest.raises(UnknownCharacter) as e:
        TOK.encode("ab#c")
    assert e.value.offset == 2 and e.value.char == "#"


def test_answer_prompt_anchor():
    ids = TOK.encode(ANSWER_PROMPT)
    assert TOK.prompt_ids == ids
    assert TOK.anchor_id == ids[-1] == TOK.stoi[":"]


def test_special_ids_stable():
    assert (TOK.pad_id, TOK.bot_id, TOK.latent_id, TOK.eot_id, TOK.eoa_id) == (0, 1, 2, 3, 4)
    assert TOK.decode_answer([TOK.stoi["1"], TOK.stoi["2"], TOK.eoa_id, TOK.stoi["3"]]) == "12"
