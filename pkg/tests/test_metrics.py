import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import ref_bleu
from seqdensity import metrics
from seqdensity.errors import InsufficientDataError, UndefinedScoreError
from seqdensity.metrics import (bleu, correlation_report, format_correlation_table, pairwise_bleu,
                                pearson, sentence_bleu, spearman)
from seqdensity.oracles import LinearGaussianToy

FIXTURES = Path(__file__).parent / "fixtures"


def test_identity_and_disjoint():
    s = [3, 4, 5, 6, 7]
    assert bleu([s], [[s]]) == pytest.approx(100.0, abs=1e-12)
    assert bleu([s], [[s]], smooth="none") == pytest.approx(100.0, abs=1e-12)
    assert bleu([[8, 9, 10]], [[s]]) == 0.0


def test_hand_oracles():
    hyp, ref = "the cat sat".split(), "the cat sat down".split()
    assert bleu([hyp], [[ref]]) == pytest.approx(100 * math.exp(1 - 4 / 3), abs=1e-9)   # 71.653
    hyp, ref = "a b c d e".split(), "a b c d f".split()
    assert bleu([hyp], [[ref]], smooth="none") == pytest.approx(100 * 0.2 ** 0.25, abs=1e-9)
    # clipped unigram count: "the" matched once
    hyp, ref = "the the the".split(), "the cat".split()
    stats = metrics.bleu_stats(hyp, [ref])
    assert stats[2] == 1 and stats[3] == 3


def test_closest_reference_length_prefers_shorter_on_tie():
    stats = metrics.bleu_stats([1, 2, 3], [[1, 2], [1, 2, 3, 4]])
    assert stats[1] == 2


def test_errors():
    with pytest.raises(UndefinedScoreError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu([[1]], [[[1]], [[2]]])
    with pytest.raises(ValueError):
        pairwise_bleu([[[1, 2]]])


tokens = st.lists(st.integers(3, 7), min_size=0, max_size=9)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(tokens, st.lists(tokens, min_size=1, max_size=3)), min_size=1,
                max_size=5), st.booleans())
def test_bleu_matches_independent_oracle(corpus, smooth):
    hyps = [h for h, _ in corpus]
    refs = [r for _, r in corpus]
    got = bleu(hyps, refs, smooth="add-one" if smooth else "none")
    assert got == pytest.approx(ref_bleu(hyps, refs, smooth), abs=1e-9)
    assert 0.0 <= got <= 100.0 + 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(tokens, min_size=2, max_size=4), min_size=1, max_size=3))
def test_pairwise_bleu_brute_force(sets):
    per_source = []
    for cands in sets:
        vals = [ref_bleu([cands[i]], [[cands[j]]]) for i in range(len(cands))
                for j in range(len(cands)) if i != j]
        per_source.append(np.mean(vals))
    assert pairwise_bleu(sets) == pytest.approx(float(np.mean(per_source)), abs=1e-9)


def test_identical_candidates_give_full_pairwise_bleu():
    assert pairwise_bleu([[[3, 4, 5, 6]] * 3]) == pytest.approx(100.0)


# -- correlation -----------------------------------------------------------------------------
def test_pearson_spearman_hand_fixtures():
    x, y = [1, 2, 3, 4], [2, 4, 5, 4]
    assert pearson(x, y) == pytest.approx(7 / math.sqrt(95), abs=1e-12)
    assert spearman(x, y) == pytest.approx(2 / math.sqrt(10), abs=1e-12)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3, 10], [1, 4, 9, 100]) == pytest.approx(1.0)


def test_correlation_errors_and_skips():
    with pytest.raises(InsufficientDataError):
        pearson([1, 2], [1, 2])
    with pytest.raises(UndefinedScoreError):
        pearson([1, 1, 1], [1, 2, 3])
    rows = correlation_report({"few": [(0, 1), (1, 2)], "flat": [(1, 0), (2, 0), (3, 0)],
                               "neg": [(1, 3), (2, 2), (3, 1)]})
    by = {r.group: r for r in rows}
    assert by["few"].pearson is None and "skipped" in by["few"].note
    assert by["flat"].pearson is None
    assert by["neg"].sign_disagreement and by["neg"].pearson == pytest.approx(-1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=12),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_correlations_invariant_to_positive_affine_maps(xs, a, b):
    ys = [v * v for v in xs]
    try:
        r = pearson(xs, ys)
    except UndefinedScoreError:
        return
    assert pearson([a * v + b for v in xs], ys) == pytest.approx(r, abs=1e-6)
    assert -1.0 <= spearman(xs, ys) <= 1.0


def test_table2_constants_from_fixture():
    tree = json.loads((FIXTURES / "table2.json").read_text())
    cols = tree.pop("columns")
    text = format_correlation_table(tree, cols)
    assert text == (FIXTURES / "table2.tsv").read_text()
    assert tree == metrics.REFERENCE_CHECKPOINT_CORRELATIONS


# -- log-likelihood ------------------------------------------------------------------------
@pytest.mark.parametrize("samples", [1, 7, 100])
def test_importance_sampling_exact_with_true_posterior(samples):
    rng = np.random.default_rng(samples)
    toy = LinearGaussianToy.random(rng, d=3, exact_q=True)
    y = toy.sample(rng, (4, 2, 3))
    est = metrics.batch_log_marginal(toy, None, y, samples, np.random.default_rng(0))
    assert np.abs(est - toy.log_marginal(y)).max() < 1e-6


def test_importance_sampling_converges_with_poor_q():
    rng = np.random.default_rng(11)
    shape = (1, 1, 2)
    toy = LinearGaussianToy.random(rng, d=2, shape=shape)
    y = np.zeros(shape)
    mean, std = toy.exact_posterior(y)
    toy.q_mean, toy.q_std = mean + 0.3 * std, 1.3 * std
    exact = toy.log_marginal(y)[0]
    small = metrics.batch_log_marginal(toy, None, y, 4, np.random.default_rng(0))[0]
    big = metrics.batch_log_marginal(toy, None, y, 20000, np.random.default_rng(0))[0]
    assert abs(big - exact) < 0.01
    assert abs(big - exact) <= abs(small - exact) + 1e-3


def test_ratio_standard_error():
    ll = np.array([-2.0, -4.0, -6.0])
    n = np.array([1.0, 2.0, 3.0])
    assert metrics._ratio_stderr(ll, n) == 0.0
    ll = np.array([-1.0, -5.0, -6.0, -2.0])
    n = np.array([1.0, 2.0, 3.0, 2.0])
    r = ll.sum() / n.sum()
    resid = ll - r * n
    manual = math.sqrt(4 / 3 * (resid ** 2).sum()) / n.sum()
    assert metrics._ratio_stderr(ll, n) == pytest.approx(manual)


def test_speed_requires_five_repetitions():
    with pytest.raises(ValueError):
        metrics.speed_benchmark(lambda m, s: None, None, [(3,)], repetitions=3)


def test_report_round_trip():
    rep = metrics.ExperimentReport("m", "ar", "raw", -1.0, 0.1, 50.0, {"beam": 70.0}, None, 3, 10)
    again = metrics.ExperimentReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert again == rep
