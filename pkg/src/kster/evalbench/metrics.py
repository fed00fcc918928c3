"""Corpus BLEU over whitespace tokens, perplexity, and paired bootstrap."""
from __future__ import annotations

import math
from collections import Counter

import numpy as np

MAX_ORDER = 4


def _tokens(x):
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp, ref, max_n=MAX_ORDER):
    """Sufficient statistics of one pair:
    ``[matches_1..n, totals_1..n, hyp_len, ref_len]``."""
    hyp, ref = _tokens(hyp), _tokens(ref)
    row = np.zeros(2 * max_n + 2, dtype=np.int64)
    for n in range(1, max_n + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        row[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        row[max_n + n - 1] = max(len(hyp) - n + 1, 0)
    row[2 * max_n] = len(hyp)
    row[2 * max_n + 1] = len(ref)
    return row


def corpus_stats(hypotheses, references, max_n=MAX_ORDER):
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if len(hypotheses) == 0:
        raise ValueError("empty corpus")
    return np.stack([sentence_stats(h, r, max_n) for h, r in zip(hypotheses, references)])


def bleu_from_stats(totals, max_n=MAX_ORDER, smooth=False):
    """BLEU from summed statistics; ``totals`` may be (..., 2*max_n+2)."""
    totals = np.asarray(totals, dtype=np.float64)
    matches = totals[..., :max_n]
    counts = totals[..., max_n:2 * max_n]
    hyp_len, ref_len = totals[..., 2 * max_n], totals[..., 2 * max_n + 1]
    if smooth:
        # add-one on orders above unigrams
        bump = np.r_[0.0, np.ones(max_n - 1)]
        matches, counts = matches + bump, counts + bump
    # orders the hypotheses are too short to contain are left out of the mean
    present = counts > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        log_p = np.where(matches > 0, np.log(np.where(matches > 0, matches, 1.0))
                         - np.log(np.where(present, counts, 1.0)), -np.inf)
        log_p = np.where(present, log_p, 0.0)
        log_bp = np.where(hyp_len >= ref_len, 0.0, 1.0 - ref_len / np.maximum(hyp_len, 1e-300))
    log_bleu = log_p.sum(axis=-1) / np.maximum(present.sum(axis=-1), 1) + log_bp
    score = np.where(np.isfinite(log_bleu) & (hyp_len > 0), 100.0 * np.exp(log_bleu), 0.0)
    return float(score) if score.ndim == 0 else score


def bleu(hypotheses, references, max_n=MAX_ORDER, smooth=False):
    """Corpus BLEU in [0, 100] from clipped n-gram precisions and a brevity
    penalty. Sentences are token lists or whitespace-separated strings.

    Orders longer than every hypothesis are skipped, so a corpus of very short
    sentences scored against itself still gets 100.
    """
    stats = corpus_stats(hypotheses, references, max_n)
    return bleu_from_stats(stats.sum(axis=0), max_n, smooth)


def perplexity(nll_sum, n_tokens):
    if n_tokens <= 0:
        raise ValueError("perplexity needs at least one token")
    return math.exp(nll_sum / n_tokens)


def paired_bootstrap(hyps_a, hyps_b, references, n_resamples=1000, seed=0,
                     max_n=MAX_ORDER, smooth=False):
    """Fraction of resampled test sets on which system A's corpus BLEU is not
    above system B's. A tie counts against A, so identical systems give 1.0.
    """
    if len(hyps_a) != len(hyps_b):
        raise ValueError("systems were run on different test sets")
    stats_a = corpus_stats(hyps_a, references, max_n)
    stats_b = corpus_stats(hyps_b, references, max_n)
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    rng = np.random.default_rng(seed)
    n = stats_a.shape[0]
    worse = 0
    for start in range(0, n_resamples, 250):
        rows = min(250, n_resamples - start)
        idx = rng.integers(0, n, size=(rows, n))
        # summed statistics of each resample via bincount weights
        weights = np.zeros((rows, n))
        np.add.at(weights, (np.repeat(np.arange(rows), n), idx.ravel()), 1.0)
        score_a = bleu_from_stats(weights @ stats_a, max_n, smooth)
        score_b = bleu_from_stats(weights @ stats_b, max_n, smooth)
        worse += int(np.sum(score_a <= score_b))
    return worse / n_resamples
