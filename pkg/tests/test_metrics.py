import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from semsic.corpus import desk_corpus_path, read_pairs
from semsic.metrics import (EMBED_DIM, HashEmbedder, MetricError, MetricReport, UserMetrics, bleu,
                            bleu_by_order, brevity_term, cosine_similarity, evaluate_users,
                            min_across_users, ngram_precision, sentence_bleu, text_similarity)

WORDS = list("abcdefgh")
sentences = st.lists(st.sampled_from(WORDS), min_size=1, max_size=12).map(" ".join)


def test_cosine_examples():
    e = np.zeros(EMBED_DIM)
    a, b = e.copy(), e.copy()
    a[:2] = 1.0
    b[0] = 1.0
    assert abs(cosine_similarity(a, b) - 1 / math.sqrt(2)) < 1e-9
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)
    c = e.copy()
    c[5] = 3.0
    assert cosine_similarity(a, c) == 0.0
    # negative correlation is clamped into range
    assert cosine_similarity(a, -a) == 0.0
    with pytest.raises(MetricError):
        cosine_similarity(a, e)


def test_text_similarity_mean_and_missing_decodes():
    class Fixed:
        dim = 2
        table = {"x": np.array([1.0, 0.0]), "y": np.array([1.0, 0.0]), "z": np.array([1.0, math.sqrt(3)])}

        def embed(self, s):
            return self.table[s]

    # lambda = (1.0, 0.5) -> 0.75
    assert abs(text_similarity(["x", "y"], ["x", "z"], Fixed()) - 0.75) < 1e-9
    assert text_similarity(["x", "y"], ["x"], Fixed()) == pytest.approx(0.5)
    assert text_similarity(["x", "y"], ["x", ""], Fixed()) == pytest.approx(0.5)


def test_hash_embedder_properties():
    emb = HashEmbedder()
    v = emb.embed("a man sleeps")
    assert v.shape == (EMBED_DIM,)
    assert np.array_equal(v, HashEmbedder().embed("a man sleeps"))
    # unrelated random-vector sentences are nearly orthogonal
    refs = [f"w{i} v{i} u{i}" for i in range(50)]
    hyps = [f"p{i} q{i} r{i}" for i in range(50)]
    assert text_similarity(refs, hyps, emb) < 0.1


def test_bleu_hand_examples():
    assert abs(sentence_bleu("a b d", "a b c", (1.0,)) - 2 / 3) < 1e-9
    assert abs(sentence_bleu("a b c d", "a b", (1.0,)) - math.exp(-1)) < 1e-9
    assert brevity_term(4, 2) == -1.0
    # printed orientation penalizes the long candidate instead
    assert brevity_term(4, 2, "printed") == 0.0
    assert brevity_term(2, 4, "printed") == -1.0
    with pytest.raises(MetricError):
        brevity_term(2, 2, "sideways")


def test_bleu_identity_and_empty_candidate():
    text = ["a man is sleeping", "two dogs run"]
    for n, v in bleu_by_order(text, text).items():
        assert v == pytest.approx(1.0, abs=1e-12)
    assert sentence_bleu("a b", "") == 0.0
    assert bleu(text, ["a man is sleeping"]) == pytest.approx(0.5)
    with pytest.raises(MetricError):
        sentence_bleu("", "a")


def test_identity_on_desk_corpus():
    text = [row[0] for row in read_pairs(desk_corpus_path())[:200]]
    assert bleu(text, text) == pytest.approx(1.0, abs=1e-12)
    assert text_similarity(text, text, HashEmbedder()) == pytest.approx(1.0, abs=1e-12)


@given(sentences, sentences, st.sampled_from(["conventional", "printed"]))
def test_scores_are_bounded(ref, cand, orientation):
    for n in range(1, 5):
        w = tuple([1 / n] * n)
        assert 0.0 <= sentence_bleu(ref, cand, w, orientation) <= 1.0
    assert 0.0 <= text_similarity([ref], [cand], HashEmbedder()) <= 1.0 + 1e-12


@given(sentences, st.permutations(WORDS), st.integers(1, 8))
def test_precision_non_increasing_for_distinct_candidates(ref, perm, k):
    cand = perm[:k]
    ref = ref.split()
    p = [ngram_precision(ref, cand, n) for n in range(1, len(cand) + 1)]
    assert all(p[i + 1] <= p[i] + 1e-15 for i in range(len(p) - 1))


def test_precision_can_rise_with_repeated_words():
    # clipping caps the repeated unigram but not the distinct bigrams
    assert ngram_precision("b a b".split(), "a b a".split(), 1) == pytest.approx(2 / 3)
    assert ngram_precision("b a b".split(), "a b a".split(), 2) == 1.0


def test_min_across_users():
    def um(s):
        return UserMetrics(s, {1: s, 2: s / 2})
    report = MetricReport({1: um(0.9), 2: um(0.7), 3: um(0.8)}, zeta=0.75)
    agg = min_across_users(report)
    assert agg["similarity"] == 0.7 and agg["bleu2"] == 0.35
    assert not report.passes
    assert report.min_users()["similarity"] == {2}
    single = MetricReport({4: um(0.6)})
    assert min_across_users(single) == {"similarity": 0.6, "bleu1": 0.6, "bleu2": 0.3}
    with pytest.raises(MetricError):
        MetricReport({})


def test_empty_decode_dominates_minimum():
    texts = {1: ["a b c"], 2: ["d e f"]}
    report = evaluate_users(texts, {1: ["a b c"], 2: [""]}, HashEmbedder())
    agg = min_across_users(report)
    assert agg["similarity"] == 0.0 and agg["bleu1"] == 0.0
    assert report.users[1].similarity == pytest.approx(1.0)
