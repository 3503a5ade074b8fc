import math
import random

import numpy as np
import pytest

from kpgen import metrics
from kpgen.errors import DataError
from kpgen.metrics import (METRIC_NAMES, HashingEmbedder, TokenMeanEmbedder, bleu, dup_kp_pct, dup_token_pct,
                           edit_dist, emb_sim, evaluate, levenshtein, quality, self_bleu, stem,
                           string_similarity)

from oracles import oracle_bleu, oracle_lev, oracle_self_bleu

# Reference pairs from the published Porter vocabulary/output lists.
PORTER_PAIRS = [
    ("caresses", "caress"), ("ponies", "poni"), ("ties", "ti"), ("caress", "caress"), ("cats", "cat"),
    ("feed", "feed"), ("agreed", "agre"), ("plastered", "plaster"), ("bled", "bled"),
    ("motoring", "motor"), ("sing", "sing"), ("conflated", "conflat"), ("troubled", "troubl"),
    ("sized", "size"), ("hopping", "hop"), ("tanned", "tan"), ("falling", "fall"), ("hissing", "hiss"),
    ("fizzed", "fizz"), ("failing", "fail"), ("filing", "file"), ("happy", "happi"), ("sky", "sky"),
    ("relational", "relat"), ("conditional", "condit"), ("rational", "ration"), ("hopeful", "hope"),
    ("goodness", "good"), ("electrical", "electr"), ("adjustment", "adjust"), ("dependent", "depend"),
    ("adoption", "adopt"), ("probate", "probat"), ("rate", "rate"), ("cease", "ceas"),
    ("controll", "control"), ("roll", "roll"), ("generalizations", "gener"), ("oscillators", "oscil"),
]


@pytest.mark.parametrize("word,expected", PORTER_PAIRS)
def test_porter_reference_pairs(word, expected):
    assert stem(word) == expected


def test_stem_edge_cases():
    assert stem("") == ""
    assert stem("<digit>") == "<digit>"
    assert stem("naïve") == "naïve"


# quality ------------------------------------------------------------------------

def test_quality_cases():
    assert quality([("a",), ("b",)], [("b",), ("c",)]) == (0.5, 0.5, 0.5)
    assert quality([("a", "b")], [("a", "b")])[2] == 1.0
    assert quality([("a",)], [("z",)]) == (0.0, 0.0, 0.0)
    assert quality([], [("a",)]) == (0.0, 0.0, 0.0)


def test_quality_stems_and_deduplicates():
    # "models" and "model" stem to the same keyphrase and count once
    p, r, f = quality([("neural", "models"), ("neural", "model"), ("x",)], [("neural", "model")])
    assert (p, r) == (0.5, 1.0)
    assert f == pytest.approx(2 / 3)


# duplication ------------------------------------------------------------------

def test_dup_kp_pct_cases():
    assert dup_kp_pct([("a", "b"), ("a", "b"), ("c",)]) == pytest.approx(33.333, abs=1e-3)
    assert dup_kp_pct([("a",), ("b",)]) == 0.0
    assert dup_kp_pct([("a",)] * 4) == 75.0
    assert dup_kp_pct([]) == 0.0


def test_dup_token_pct_cases():
    assert dup_token_pct([("a", "b"), ("a",)]) == pytest.approx(33.333, abs=1e-3)
    assert dup_token_pct([("a", "b", "c")]) == 0.0
    assert dup_token_pct([("a",), ("a",), ("a",)]) == pytest.approx(66.667, abs=1e-3)


# Self-BLEU --------------------------------------------------------------------

def test_self_bleu_cases():
    assert self_bleu([("a", "b"), ("a", "b")]) == pytest.approx(100.0)
    assert self_bleu([("a", "b")]) == 0.0
    kps = [("a", "b"), ("c", "d"), ("a", "b")]
    assert self_bleu(kps) == oracle_self_bleu(kps)


def test_self_bleu_matches_oracle_on_random_lists():
    rng = random.Random(2024)
    for _ in range(200):
        kps = [tuple(rng.choice("abcde") for _ in range(rng.randint(1, 4))) for _ in range(rng.randint(0, 6))]
        assert self_bleu(kps) == oracle_self_bleu(kps), kps


def test_bleu_brevity_penalty_prefers_shorter_on_tie():
    # candidate length 2, references of length 1 and 3: tie, the shorter one wins (no penalty)
    assert bleu(("a", "b"), [("a",), ("a", "b", "c")]) == oracle_bleu(("a", "b"), [("a",), ("a", "b", "c")])


# edit distance --------------------------------------------------------------

def test_levenshtein_matches_recursive_oracle():
    rng = random.Random(0)
    for _ in range(300):
        a = "".join(rng.choice("abc ") for _ in range(rng.randint(0, 7)))
        b = "".join(rng.choice("abc ") for _ in range(rng.randint(0, 7)))
        assert levenshtein(a, b) == oracle_lev(a, b)


def test_string_similarity_cases():
    assert string_similarity("same", "same") == 100.0
    assert string_similarity("ab", "cd") == 0.0
    assert string_similarity("kitten", "sitting") == pytest.approx(57.143, abs=1e-3)
    assert string_similarity("", "") == 100.0


def test_edit_dist_mean_pairwise():
    kps = [("ab",), ("ab",), ("cd",)]
    assert edit_dist(kps) == pytest.approx((100 + 0 + 0) / 3)
    assert edit_dist([("x",)]) == 0.0


# embeddings ----------------------------------------------------------------------

def test_emb_sim_cases():
    emb = TokenMeanEmbedder({"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0]),
                             "c": np.array([1.0, 1.0])})
    assert emb_sim([("a",), ("a",)], emb) == pytest.approx(1.0)
    assert emb_sim([("a",), ("b",)], emb) == pytest.approx(0.0)
    # pairs: (a,b)=0, (a,c)=1/sqrt2, (b,c)=1/sqrt2
    assert emb_sim([("a",), ("b",), ("c",)], emb) == pytest.approx(2 / math.sqrt(2) / 3, abs=1e-6)
    # mean of token vectors: "a b" -> (0.5, 0.5) is parallel to c
    assert emb_sim([("a", "b"), ("c",)], emb) == pytest.approx(1.0)


def test_emb_sim_skips_unknown_keyphrases():
    emb = TokenMeanEmbedder({"a": np.array([1.0, 0.0])})
    assert emb_sim([("a",), ("zzz",)], emb) == 0.0


def test_token_mean_embedder_from_file(tmp_path):
    path = tmp_path / "vec.txt"
    path.write_text("a 1 0\nb 0 1\n", encoding="utf-8")
    emb = TokenMeanEmbedder.from_file(path)
    np.testing.assert_allclose(emb(("a", "b")), [0.5, 0.5])
    path.write_text("a 1 0\nb 0 1 2\n", encoding="utf-8")
    with pytest.raises(DataError):
        TokenMeanEmbedder.from_file(path)


def test_hashing_embedder_deterministic():
    e1, e2 = HashingEmbedder(), HashingEmbedder()
    np.testing.assert_array_equal(e1(("x", "y")), e2(("x", "y")))
    assert np.linalg.norm(e1(("x",))) == pytest.approx(1.0)


# reports -----------------------------------------------------------------------

def test_evaluate_report():
    golds = [[("a", "b"), ("c",)], [("d",)]]
    preds = [[("a", "b"), ("a", "b")], [("e",)]]
    report = evaluate(preds, golds)
    assert set(report.means) == set(METRIC_NAMES)
    assert report.per_record["dup_kp_pct"] == [50.0, 0.0]
    assert report.means["f1_at_m"] == pytest.approx((2 / 3 + 0) / 2)
    assert report.to_json()["n_records"] == 2


def test_evaluate_gold_against_itself():
    golds = [[("a", "b"), ("c",)], [("d",), ("d", "e")]]
    report = evaluate(golds, golds)
    assert report.means["f1_at_m"] == 1.0
    assert report.means["dup_kp_pct"] == 0.0


def test_evaluate_misaligned():
    with pytest.raises(DataError):
        evaluate([[("a",)]], [])
    with pytest.raises(DataError):
        metrics.mean_f1([[("a",)]], [])
