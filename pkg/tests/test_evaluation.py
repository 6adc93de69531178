import copy
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeaudio.evaluation import (
    RAW,
    EvalItem,
    Normalization,
    QAResult,
    ReconciliationError,
    align,
    caption_then_answer,
    cer,
    corpus_rate,
    load_items,
    read_results,
    score_set,
    wer,
    write_results,
)
from moeaudio.gateway import MockTransport
from oracles import edit_distance, edit_ops
from qa_world import (
    clients,
    degenerate_captioner,
    item_audio,
    oracle_captioner,
    random_reader,
    rule_reader,
    synthetic_items,
)


# -- hand cases -----------------------------------------------------------------

def test_wer_hand_cases():
    rate, ops = wer("the cat sat", "the cat")
    assert rate == 1 / 3 and (ops.substitutions, ops.insertions, ops.deletions) == (0, 0, 1)
    assert wer("the cat sat", "the cat sat")[0] == 0.0
    rate, ops = wer("the cat sat", "a cat sat on")
    assert rate == 2 / 3 and (ops.substitutions, ops.insertions) == (1, 1)
    assert wer("a b", "c d e f")[0] == 2.0  # rates above 1 are allowed


def test_cer_hand_cases():
    rate, ops = cer("kitten", "sitting")
    assert ops.errors == 3 and rate == 3 / 6
    assert cer("a b", "ab")[0] == 0.0
    assert cer("a b", "ab", drop_whitespace=False)[1].errors == 1


def test_normalization():
    assert wer("The CAT, sat!", "the cat sat")[0] == 0.0
    assert wer("The cat", "the cat", RAW)[0] == 0.5
    assert Normalization(strip_punctuation=False).apply("  Hi,  there ") == "hi, there"
    assert Normalization().apply("don't-stop") == "don t stop"


def test_empty_reference_is_flagged_and_guarded():
    rate, ops = wer("", "extra words")
    assert ops.empty_reference and ops.insertions == 2 and rate == 2.0
    rate, ops = wer("", "")
    assert ops.empty_reference and rate == 0.0
    assert not wer("x", "")[1].empty_reference


# -- oracle comparison --------------------------------------------------------------

def random_words(rng, vocab, max_len):
    return [rng.choice(vocab) for _ in range(rng.randint(0, max_len))]


def test_word_alignment_matches_full_dp_on_500_pairs():
    rng = random.Random(2024)
    vocab = ["a", "b", "c", "the", "cat", "sat"]
    for _ in range(500):
        ref, hyp = random_words(rng, vocab, 12), random_words(rng, vocab, 12)
        ops = align(ref, hyp)
        assert ops.errors == edit_distance(ref, hyp)
        s, ins, dele = edit_ops(ref, hyp)
        assert s + ins + dele == ops.errors
        assert ops.insertions - ops.deletions == len(hyp) - len(ref)


def test_char_alignment_matches_full_dp_on_500_pairs():
    rng = random.Random(7)
    for _ in range(500):
        ref = "".join(rng.choice("abcde") for _ in range(rng.randint(0, 20)))
        hyp = "".join(rng.choice("abcde") for _ in range(rng.randint(0, 20)))
        _, ops = cer(ref, hyp, RAW)
        assert ops.errors == edit_distance(ref, hyp)
        assert ops.insertions - ops.deletions == len(hyp) - len(ref)
        assert ops.ref_len == len(ref)


words = st.lists(st.sampled_from("abcd"), max_size=8)


@settings(max_examples=200, deadline=None)
@given(words, words, words)
def test_distance_is_a_metric(a, b, c):
    d = lambda x, y: align(x, y).errors  # noqa: E731
    assert d(a, b) == d(b, a)
    assert (d(a, b) == 0) == (a == b)
    assert d(a, c) <= d(a, b) + d(b, c)


@settings(max_examples=100, deadline=None)
@given(words, words, st.sampled_from("abcdz"))
def test_appending_a_word_changes_errors_by_at_most_one(ref, hyp, w):
    base = align(ref, hyp).errors
    assert abs(align(ref, hyp + [w]).errors - base) <= 1


def test_corpus_rate_pools_counts():
    pairs = [("the cat sat", "the cat"), ("a b c d", "a b c d")]
    totals = corpus_rate(pairs)
    assert totals["ref_len"] == 7 and totals["deletions"] == 1 and totals["rate"] == 1 / 7
    assert totals["utterances"] == 2


# -- caption-then-answer ------------------------------------------------------------

def run_items(items, captioner, reader):
    cap, qa = clients(captioner, reader)
    return [caption_then_answer(it, cap, qa, audio=item_audio(it)) for it in items]


def test_oracle_captioner_with_rule_reader_scores_one():
    items = synthetic_items(50, seed=1)
    results = run_items(items, oracle_captioner(items), rule_reader())
    report = score_set(items, results)
    assert report.accuracy == 1.0 and report.unextractable == 0
    assert set(report.by_category) == {"event", "scene"}


def test_empty_captions_with_random_reader_hover_at_chance():
    items = synthetic_items(1000, seed=2)
    acc = score_set(items, run_items(items, degenerate_captioner(), random_reader(3))).accuracy
    sigma = math.sqrt(0.25 * 0.75 / 1000)
    assert abs(acc - 0.25) <= 3 * sigma


def test_reader_prompt_carries_caption_and_options():
    items = synthetic_items(1, seed=4)
    reader = rule_reader()
    run_items(items, oracle_captioner(items), reader)
    prompt = reader.calls[0]["messages"][0]["content"]
    assert "dominated by" in prompt and "\nA. " in prompt and "\nD. " in prompt
    assert isinstance(prompt, str)  # the reader never receives audio


@pytest.mark.parametrize("reply,answer,correct,unextractable", [
    ("The answer is B.", "B", True, False),
    ("Answer: C", "C", False, False),
    ("I can't tell from the caption", None, False, True),
])
def test_reader_reply_extraction(reply, answer, correct, unextractable):
    item = EvalItem("x", "", "Q?", ("a", "b", "c", "d"), "B")
    cap, qa = clients(MockTransport(lambda b: "cap"), MockTransport(lambda b: reply))
    r = caption_then_answer(item, cap, qa, audio=item_audio(item))
    assert (r.answer, r.correct, r.unextractable) == (answer, correct, unextractable)


def test_scoring_is_order_invariant_and_reconciles():
    items = synthetic_items(30, seed=5)
    results = run_items(items, degenerate_captioner(), random_reader(6))
    report = score_set(items, results)
    shuffled = results[:]
    random.Random(0).shuffle(shuffled)
    assert score_set(items, shuffled) == report
    with pytest.raises(ReconciliationError):
        score_set(items, results[:-1])
    with pytest.raises(ReconciliationError):
        score_set(items, results + [QAResult("ghost", "", "A", False)])


def test_items_are_not_mutated():
    items = synthetic_items(10, seed=8)
    before = copy.deepcopy(items)
    run_items(items, oracle_captioner(items), rule_reader())
    assert items == before


def test_accuracy_recomputes_from_results_file(tmp_path):
    items = synthetic_items(40, seed=9)
    results = run_items(items, degenerate_captioner(), random_reader(10))
    write_results(results, tmp_path / "results.jsonl")
    loaded = read_results(tmp_path / "results.jsonl")
    assert loaded == results
    assert sum(r.correct for r in loaded) / len(loaded) == score_set(items, results).accuracy


def test_item_validation_and_loading(tmp_path):
    with pytest.raises(ValueError):
        EvalItem("x", "", "Q", ("a", "b", "c"), "A")
    with pytest.raises(ValueError):
        EvalItem("x", "", "Q", ("a", "b", "c", "d"), "E")
    path = tmp_path / "items.jsonl"
    path.write_text('{"id": 1, "question": "Q", "choices": ["a", "b", "c", "d"], "gold": "D"}\n\n')
    (item,) = load_items(path)
    assert item.id == "1" and item.question_block() == "Q\nA. a\nB. b\nC. c\nD. d"
    path.write_text('{"id": 1, "question": "Q", "choices": ["a"], "gold": "D"}\n')
    with pytest.raises(ValueError, match="items.jsonl:1"):
        load_items(path)


def test_report_rendering():
    items = synthetic_items(8, seed=11)
    report = score_set(items, run_items(items, oracle_captioner(items), rule_reader()))
    table = report.to_table().splitlines()
    assert table[0].split() == ["category", "n", "correct", "accuracy"]
    assert table[-1].split() == ["ALL", "8", "8", "1.0000"]
    assert '"accuracy": 1.0' in report.to_json()
