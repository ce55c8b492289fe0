import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from changediff.metrics import bleu4, corpus_rouge_l, evaluate, lcs_length, rouge_l

S = str.split

CORPUS_10 = [
    ("a building appears in the top left of the bare land",
     ["a building appears in the top left of the bare land", "a house is built in the top left corner"]),
    ("the scene is the same as before", ["the scene is the same as before", "nothing has changed"]),
    ("a road is built across the land", ["a horizontal road is built across the bare land"]),
    ("the trees are removed", ["the trees in the bottom right are removed", "some trees were cut down"]),
    ("two houses appear near the road", ["a house appears beside the road", "two buildings are built near the road"]),
    ("no change", ["there is no change", "the two scenes seem identical"]),
    ("a vertical road appears", ["a vertical road is built across the bare land"]),
    ("many buildings appear in the scene", ["several buildings are constructed", "many houses appear"]),
    ("the bare land is replaced by a parking lot", ["a parking lot replaces the bare land"]),
    ("trees trees trees", ["the trees in the top left are removed"]),
]


def test_bleu_matches_reference_implementation_10():
    cands = [S(c) for c, _ in CORPUS_10]
    refs = [[S(r) for r in rs] for _, rs in CORPUS_10]
    assert bleu4(cands, refs) == pytest.approx(oracles.reference_bleu(cands, refs), abs=1e-6)


def test_bleu_matches_reference_implementation_2():
    cands = [S("the cat is on the mat"), S("there is a cat on the mat")]
    refs = [[S("the cat is on the mat"), S("a cat sits on the mat")], [S("a cat is on the mat")]]
    assert bleu4(cands, refs) == pytest.approx(oracles.reference_bleu(cands, refs), abs=1e-6)


def test_bleu_hand_value():
    # 5-token candidate, 6-token reference, 4/5 unigrams, 3/4 bigrams, 2/3 trigrams, 1/2 four-grams
    cand, ref = S("a b c d x"), S("a b c d e f")
    expected = math.exp(1 - 6 / 5) * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert bleu4([cand], [[ref]]) == pytest.approx(expected, abs=1e-12)


def test_bleu_boundary_cases():
    sent = S("a new road is built across the land")
    assert bleu4([sent], [[sent]]) == pytest.approx(1.0, abs=1e-12)
    assert bleu4([S("x y z w")], [[S("a b c d")]]) < 1e-8
    assert bleu4([[]], [[sent]]) == 0.0
    with pytest.raises(ValueError):
        bleu4([sent], [])
    with pytest.raises(ValueError):
        bleu4([sent], [[]])


def test_lcs_hand_cases():
    assert lcs_length(S("the cat sat"), S("the cat ate")) == 2
    assert lcs_length(S("a b c d e"), S("b d e a")) == 3
    assert lcs_length([], S("a")) == 0


@given(st.lists(st.sampled_from("abcd"), max_size=8), st.lists(st.sampled_from("abcd"), max_size=8))
def test_lcs_matches_brute_force(a, b):
    assert lcs_length(a, b) == oracles.brute_force_lcs(a, b)
    assert lcs_length(a, b) == lcs_length(b, a)


def test_rouge_hand_cases():
    # P = R = 2/3, so F = 2/3 for any beta
    assert rouge_l(S("the cat sat"), [S("the cat ate")]) == pytest.approx(2 / 3, abs=1e-15)
    # P = 1, R = 0.4: F = 2.2 * 0.4 / (0.4 + 1.2) = 0.55
    assert rouge_l(S("the cat"), [S("the cat sat on mat")]) == pytest.approx(0.55, abs=1e-15)
    # best reference wins
    assert rouge_l(S("the cat"), [S("dog"), S("the cat")]) == 1.0


def test_rouge_boundary_cases():
    sent = S("a road appears")
    assert rouge_l(sent, [sent]) == 1.0
    assert rouge_l(sent, [S("x y z")]) == 0.0
    with pytest.raises(ValueError):
        rouge_l(sent, [])
    assert corpus_rouge_l([], []) == 0.0


def test_evaluate_report():
    cands = [S(c) for c, _ in CORPUS_10]
    refs = [[S(r) for r in rs] for _, rs in CORPUS_10]
    report = evaluate(cands, refs)
    assert set(report) == {"bleu4", "rougeL", "n_items"} and report["n_items"] == 10
    assert 0 < report["bleu4"] < 1 and 0 < report["rougeL"] < 1
    perfect = evaluate([r[0] for r in refs], refs)
    assert perfect["bleu4"] == pytest.approx(1.0) and perfect["rougeL"] == 1.0
