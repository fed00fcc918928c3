"""Training with retrieval dropout, smoothed decoding, scoring and analysis."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from kster._validation import check_pairs, check_positive_int
from kster.adapter import (
    PROB_FLOOR, AdamState, adam_update, adapter_init, backward_batch, batch_loss,
    fix_bandwidth, fix_mixing_weight, forward_batch, forward_step, gold_probabilities,
)
from kster.basemodel import force_decode_keys
from kster.corpus import EOS_ID
from kster.kernels import KernelKind
from kster.vecstore import ds_build, ivfpq_search_batch

DEFAULT_BANDWIDTHS = (0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0)
DEFAULT_LAMBDAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class TrainConfig:
    k: int = 16
    retrieval_dropout: bool = True
    epochs: int = 10
    batch_tokens: int = 1024
    lr: float = 2e-4
    seed: int = 0
    kernel: str = "gaussian"
    learn_kernel: bool = True
    learn_weight: bool = True
    hidden: int | None = None
    fixed_bandwidth: float = 10.0
    fixed_lambda: float = 0.5

    def __post_init__(self):
        check_positive_int(self.k, "k")
        check_positive_int(self.batch_tokens, "batch_tokens")
        KernelKind(self.kernel)


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    beam: int = 4
    max_len: int | None = None
    k: int = 16
    exact: bool = True
    nprobe: int | None = None
    length_normalize: bool = False

    def __post_init__(self):
        if self.mode not in ("greedy", "beam"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        check_positive_int(self.beam, "beam")


# datastore construction -------------------------------------------------------

def build_datastore_from_corpus(base, corpus, use_domains=False, domain_ids=None, ids=None):
    """One record per target token plus one end-of-sequence record per sentence.

    ``ids`` optionally supplies pre-encoded ``(src_ids, tgt_ids)`` pairs (for
    base models that do not own a vocabulary).
    """
    if use_domains and domain_ids is None:
        domain_ids = {d: i for i, d in enumerate(corpus.domains)}
    records = []
    for n, sent in enumerate(corpus):
        src, tgt = ids[n] if ids is not None else (
            base.encode_source(sent.src), base.encode_target(sent.tgt))
        domain = domain_ids[sent.domain] if use_domains else None
        records.extend(force_decode_keys(base, src, tgt, domain))
    return ds_build(records, base.dim)


def build_domain_datastores(base, corpus):
    """Separate store per domain (domain known at test time)."""
    return {d: build_datastore_from_corpus(base, corpus.filter(d)) for d in corpus.domains}


# retrieval --------------------------------------------------------------------

def _search(ds, queries, k, exact=True, nprobe=None):
    if exact or ds.index is None:
        return ds.search_batch(queries, k)
    return ivfpq_search_batch(ds, queries, k, nprobe)


def retrieve(ds, queries, k, training=False, exact=True, nprobe=None):
    """Neighbors for many queries -> (distances, ids).

    In training mode k+1 neighbors are searched and the nearest is dropped.
    Identical query rows are searched once.
    """
    queries = np.asarray(queries, dtype=np.float32)
    if training and ds.count < 2:
        raise ValueError("retrieval dropout needs a datastore with at least 2 records")
    if queries.shape[0] == 0 or ds.count == 0:
        n = 0 if ds.count == 0 else min(k, ds.count)
        return (np.zeros((queries.shape[0], n), np.float32),
                np.zeros((queries.shape[0], n), np.int64))
    uniq, inverse = np.unique(queries, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    dist, ids = _search(ds, uniq, k + 1 if training else k, exact, nprobe)
    if training:
        dist, ids = dist[:, 1:], ids[:, 1:]
    return dist[inverse], ids[inverse]


def retrieve_for_training(ds, q, k):
    """Search k+1 neighbors and drop the nearest (retrieval dropout)."""
    dist, ids = retrieve(ds, np.asarray(q, dtype=np.float32)[None], k, training=True)
    return ds.neighbors(dist[0], ids[0])


def retrieve_for_inference(ds, q, k, exact=True, nprobe=None):
    if ds.count == 0:
        return []
    dist, ids = _search(ds, np.asarray(q, dtype=np.float32)[None], k, exact, nprobe)
    return ds.neighbors(dist[0], ids[0])


# teacher-forced step tables -----------------------------------------------------

@dataclass
class StepTable:
    """Teacher-forced steps of a corpus with their retrieved neighbors."""

    queries: np.ndarray      # (N, d) float32
    gold: np.ndarray         # (N,)
    p_model_gold: np.ndarray  # (N,)
    sentence: np.ndarray     # (N,) sentence index of each step
    dist: np.ndarray         # (N, k)
    ids: np.ndarray          # (N, k)
    values: np.ndarray       # (N, k)
    training: bool

    def __len__(self):
        return self.gold.shape[0]

    def batch(self, ds, idx):
        return (self.queries[idx], ds.keys[self.ids[idx]], self.dist[idx],
                self.values[idx], self.gold[idx], self.p_model_gold[idx])


def _encoded(base, corpus, ids):
    if ids is not None:
        return ids
    return [(base.encode_source(s.src), base.encode_target(s.tgt)) for s in corpus]


def prepare_steps(base, ds, corpus, k, training=False, ids=None):
    queries, gold, pm_gold, sent = [], [], [], []
    for n, (src, tgt) in enumerate(_encoded(base, corpus, ids)):
        q, p_m = base.force_decode(src, tgt)
        y = np.asarray(list(tgt) + [EOS_ID])
        queries.append(q)
        gold.append(y)
        pm_gold.append(p_m[np.arange(len(y)), y])
        sent.append(np.full(len(y), n))
    if not queries:
        raise ValueError("empty corpus")
    queries = np.concatenate(queries).astype(np.float32)
    dist, nb_ids = retrieve(ds, queries, k, training=training)
    return StepTable(queries, np.concatenate(gold), np.concatenate(pm_gold),
                     np.concatenate(sent), dist, nb_ids,
                     ds.values[nb_ids].astype(np.int64), training)


def step_losses(params, steps, ds, chunk=4096):
    """Per-step negative log-likelihood of the gold tokens."""
    out = np.empty(len(steps))
    if steps.ids.shape[1] == 0:
        return batch_loss(steps.p_model_gold)
    for start in range(0, len(steps), chunk):
        idx = np.arange(start, min(start + chunk, len(steps)))
        q, keys, dist, values, gold, pm = steps.batch(ds, idx)
        cache = forward_batch(params, q, keys, dist)
        _, p_y, _ = gold_probabilities(cache, values, gold, pm)
        out[idx] = batch_loss(p_y)
    return out


def mean_loss(params, steps, ds):
    return float(np.mean(step_losses(params, steps, ds)))


# training ---------------------------------------------------------------------

def initial_params(cfg, dim, calibration_distances=None):
    params = adapter_init(dim, cfg.hidden, cfg.kernel, cfg.seed, calibration_distances)
    if not cfg.learn_kernel:
        params = fix_bandwidth(params, cfg.fixed_bandwidth)
    if not cfg.learn_weight:
        params = fix_mixing_weight(params, cfg.fixed_lambda)
    return params


def train_adapter(base, ds, corpus, cfg=None, steps=None, params=None):
    """Fit the smoothing head on teacher-forced steps of ``corpus``.

    Returns ``(params, history)``; ``history[0]`` is the mean loss before any
    update and ``history[e]`` the mean batch loss during epoch ``e``.
    """
    cfg = cfg or TrainConfig()
    if steps is None:
        if len(corpus) == 0:
            raise ValueError("empty corpus")
        steps = prepare_steps(base, ds, corpus, cfg.k, training=cfg.retrieval_dropout)
    if params is None:
        params = initial_params(cfg, ds.dim, steps.dist.ravel())
    mask = params.group_mask(cfg.learn_kernel, cfg.learn_weight)
    history = [mean_loss(params, steps, ds)]
    if not mask.any():
        return params, history + [history[0]] * cfg.epochs
    state = AdamState.for_params(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(steps))
        total = 0.0
        for start in range(0, len(order), cfg.batch_tokens):
            idx = order[start:start + cfg.batch_tokens]
            q, keys, dist, values, gold, pm = steps.batch(ds, idx)
            cache = forward_batch(params, q, keys, dist)
            _, p_y, _ = gold_probabilities(cache, values, gold, pm)
            total += float(batch_loss(p_y).sum())
            grads = backward_batch(params, cache, values, gold, pm)
            params, state = adam_update(params, grads, state, mask)
        history.append(total / len(order))
    return params, history


def tune_knnmt(steps, ds, kind="gaussian", bandwidths=DEFAULT_BANDWIDTHS, lambdas=DEFAULT_LAMBDAS):
    """Grid-search a fixed bandwidth and mixing weight on ``steps`` -> (sigma, lam, loss)."""
    template = adapter_init(ds.dim, 1, kind, 0)
    best = None
    for sigma in bandwidths:
        for lam in lambdas:
            params = fix_mixing_weight(fix_bandwidth(template, sigma), lam)
            loss = mean_loss(params, steps, ds)
            if best is None or loss < best[2] - 1e-12:
                best = (sigma, lam, loss)
    return best


def constant_params(dim, sigma, lam, kind="gaussian", hidden=None):
    return fix_mixing_weight(fix_bandwidth(adapter_init(dim, hidden, kind, 0), sigma), lam)


# decoding and scoring -----------------------------------------------------------

def smoothed_step(base, ds, params, src, prefix, k, exact=True, nprobe=None):
    """One inference step -> (p, tape). Retrieval dropout is never applied here."""
    step = base.step(src, prefix)
    neighbors = retrieve_for_inference(ds, step.q, k, exact, nprobe)
    ids = np.array([nb.id for nb in neighbors], dtype=np.int64)
    keys = ds.keys[ids] if len(ids) else np.zeros((0, ds.dim))
    return forward_step(params, step.q, keys, [nb.value for nb in neighbors],
                        [nb.distance for nb in neighbors], step.p_m)


def _max_len(src, cfg):
    return cfg.max_len if cfg.max_len is not None else len(src) + 5


def greedy_decode(base, ds, params, src, cfg=None):
    cfg = cfg or DecodeConfig()
    out = []
    for _ in range(_max_len(src, cfg) + 1):
        p, _ = smoothed_step(base, ds, params, src, out, cfg.k, cfg.exact, cfg.nprobe)
        tok = int(np.argmax(p))
        if tok == EOS_ID:
            break
        out.append(tok)
    return out


def beam_decode(base, ds, params, src, cfg=None):
    """Beam search over summed log-probabilities.

    Candidates are ranked by score, then token sequence, then parent beam
    index, which makes width 1 identical to greedy decoding.
    """
    cfg = cfg or DecodeConfig(mode="beam")
    width = cfg.beam
    beams = [(0.0, [], False)]
    limit = _max_len(src, cfg)
    for _ in range(limit + 1):
        if all(done for _, _, done in beams):
            break
        cands = []
        for b, (score, toks, done) in enumerate(beams):
            if done:
                cands.append((score, toks, b, True))
                continue
            p, _ = smoothed_step(base, ds, params, src, toks, cfg.k, cfg.exact, cfg.nprobe)
            logp = np.log(np.maximum(p, PROB_FLOOR))
            top = np.argsort(-logp, kind="stable")[:width]
            for tok in top:
                tok = int(tok)
                if tok == EOS_ID or len(toks) >= limit:
                    cands.append((score + logp[tok], toks, b, True))
                else:
                    cands.append((score + logp[tok], toks + [tok], b, False))

        def rank(c):
            score, toks, b, _ = c
            if cfg.length_normalize:
                score = score / (len(toks) + 1)
            return (-score, toks, b)

        cands.sort(key=rank)
        beams = [(s, t, d) for s, t, _, d in cands[:width]]
    best = min(beams, key=lambda c: (-(c[0] / (len(c[1]) + 1) if cfg.length_normalize else c[0]), c[1]))
    return best[1]


def decode(base, ds, params, src, cfg=None):
    cfg = cfg or DecodeConfig()
    if cfg.mode == "beam":
        return beam_decode(base, ds, params, src, cfg)
    return greedy_decode(base, ds, params, src, cfg)


def score_sequence(base, ds, params, src, tgt, k=16):
    """Total log-probability of ``tgt`` under forced decoding (no dropout)."""
    q, p_m = base.force_decode(src, tgt)
    gold = list(tgt) + [EOS_ID]
    dist, ids = retrieve(ds, q, k, training=False)
    total = 0.0
    for i, y in enumerate(gold):
        keys = ds.keys[ids[i]] if ids.shape[1] else np.zeros((0, ds.dim))
        p, _ = forward_step(params, q[i], keys, ds.values[ids[i]].astype(np.int64),
                            dist[i], p_m[i])
        total += math.log(max(float(p[y]), PROB_FLOOR))
    return total


def score_corpus(base, ds, params, pairs, k=16):
    """Per-sentence log-probabilities for encoded ``(src, tgt)`` pairs."""
    return [score_sequence(base, ds, params, s, t, k) for s, t in pairs]


def contrastive_eval(base, ds, params, pairs, k=16):
    """Fraction of items whose reference strictly outscores every contrastive variant.

    ``pairs``: iterable of ``(src, reference, [contrastive, ...])`` id sequences.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no contrastive pairs given")
    correct = 0
    for src, ref, contrastive in pairs:
        if not contrastive:
            raise ValueError("each item needs at least one contrastive translation")
        ref_score = score_sequence(base, ds, params, src, ref, k)
        if all(ref_score > score_sequence(base, ds, params, src, c, k) for c in contrastive):
            correct += 1
    return correct / len(pairs)


def smoothing_attribution(base, ds, params, pairs, category_of, k=16):
    """Share of forced-decoding steps whose gold token is won by retrieval.

    A step counts when the gold token is the argmax of the example
    distribution but not of the model distribution. Returns
    ``({class: ratio}, total_steps)`` with ratios over all steps.
    """
    counts, total = {}, 0
    for src, tgt in pairs:
        q, p_m = base.force_decode(src, tgt)
        gold = list(tgt) + [EOS_ID]
        dist, ids = retrieve(ds, q, k, training=False)
        for i, y in enumerate(gold):
            total += 1
            if ids.shape[1] == 0:
                continue
            _, tape = forward_step(params, q[i], ds.keys[ids[i]],
                                   ds.values[ids[i]].astype(np.int64), dist[i], p_m[i])
            p_e = np.zeros(p_m.shape[1])
            for tok, prob in tape.p_example.items():
                p_e[tok] = prob
            if int(np.argmax(p_e)) == y and int(np.argmax(p_m[i])) != y:
                cls = category_of(y)
                counts[cls] = counts.get(cls, 0) + 1
    if total == 0:
        return {}, 0
    return {c: n / total for c, n in sorted(counts.items())}, total


# estimator front-end ------------------------------------------------------------

class KsterTranslator(BaseEstimator):
    """Kernel-smoothed translator around a frozen base model and a datastore.

    ``fit(X, y)`` trains the bandwidth/mixing head on token-string pairs,
    ``predict(X)`` decodes, ``score(X, y)`` is the mean per-token
    log-likelihood.
    """

    def __init__(self, base_model=None, datastore=None, kernel="gaussian", n_neighbors=16,
                 retrieval_dropout=True, learn_kernel=True, learn_weight=True,
                 fixed_bandwidth=10.0, fixed_lambda=0.5, hidden=None, epochs=10,
                 batch_tokens=1024, learning_rate=2e-4, decode="greedy", beam=4,
                 random_state=0):
        self.base_model = base_model
        self.datastore = datastore
        self.kernel = kernel
        self.n_neighbors = n_neighbors
        self.retrieval_dropout = retrieval_dropout
        self.learn_kernel = learn_kernel
        self.learn_weight = learn_weight
        self.fixed_bandwidth = fixed_bandwidth
        self.fixed_lambda = fixed_lambda
        self.hidden = hidden
        self.epochs = epochs
        self.batch_tokens = batch_tokens
        self.learning_rate = learning_rate
        self.decode = decode
        self.beam = beam
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(k=self.n_neighbors, retrieval_dropout=self.retrieval_dropout,
                           epochs=self.epochs, batch_tokens=self.batch_tokens,
                           lr=self.learning_rate, seed=self.random_state, kernel=self.kernel,
                           learn_kernel=self.learn_kernel, learn_weight=self.learn_weight,
                           hidden=self.hidden, fixed_bandwidth=self.fixed_bandwidth,
                           fixed_lambda=self.fixed_lambda)

    def _pairs(self, X, y):
        check_pairs(X, y)
        base = self.base_model
        return [(base.encode_source(s), base.encode_target(t)) for s, t in zip(X, y)]

    def fit(self, X, y):
        if self.base_model is None or self.datastore is None:
            raise ValueError("base_model and datastore must be set before fit")
        cfg = self._train_config()
        steps = prepare_steps(self.base_model, self.datastore, None, cfg.k,
                              training=cfg.retrieval_dropout, ids=self._pairs(X, y))
        self.params_, self.loss_history_ = train_adapter(
            self.base_model, self.datastore, None, cfg, steps=steps)
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        cfg = DecodeConfig(mode=self.decode, beam=self.beam, k=self.n_neighbors)
        base = self.base_model
        return [base.decode_target(decode(base, self.datastore, self.params_,
                                          base.encode_source(s), cfg)) for s in X]

    def score(self, X, y):
        check_is_fitted(self, "params_")
        pairs = self._pairs(X, y)
        total = sum(score_corpus(self.base_model, self.datastore, self.params_, pairs,
                                 self.n_neighbors))
        return total / sum(len(t) + 1 for _, t in pairs)
