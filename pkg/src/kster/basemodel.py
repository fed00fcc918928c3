"""Frozen base models that provide model distributions and query vectors.

Any base model used by the pipeline exposes ``vocab_size``, ``dim``,
``step(src_ids, prefix_ids)`` and ``force_decode(src_ids, tgt_ids)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from kster._validation import check_pairs
from kster.corpus import BOS_ID, EOS_ID, Vocab
from kster.fp16 import quantize
from kster.vecstore import ExampleRecord

REPLAY_MAGIC = b"KRPL"
REPLAY_VERSION = 1


@dataclass
class BaseStep:
    p_m: np.ndarray
    q: np.ndarray


def _normalize_counts(counts, alpha):
    """Add-alpha row normalization; rows with no mass become uniform."""
    smoothed = counts + alpha
    totals = smoothed.sum(axis=1, keepdims=True)
    uniform = np.full_like(smoothed, 1.0 / smoothed.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        rows = smoothed / totals
    return np.where(totals > 0, rows, uniform)


class ToyLexicalModel(BaseEstimator):
    """Position-aligned lexical translation model built by counting.

    The next-token distribution interpolates a source-token translation
    table with a target bigram table::

        p_m(. | x, y_<i) = gamma * P(. | x_i) + (1 - gamma) * P(. | y_{i-1})

    and the query is ``[emb(x_i); emb(y_{i-1})]`` with embeddings drawn once
    from ``random_state`` and snapped to the binary16 grid, so that a query
    equal to a stored key is found at distance exactly 0.
    """

    def __init__(self, src_vocab=(), tgt_vocab=(), embed_dim=32, alpha=0.1,
                 gamma=0.7, context_scale=1.0, random_state=0):
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.embed_dim = embed_dim
        self.alpha = alpha
        self.gamma = gamma
        self.context_scale = context_scale
        self.random_state = random_state

    def fit(self, X, y):
        """X: source token lists, y: target token lists of equal length."""
        check_pairs(X, y)
        for i, (s, t) in enumerate(zip(X, y)):
            if len(s) != len(t):
                raise ValueError(f"sentence {i}: source and target lengths differ")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        self.src_vocab_ = Vocab(self.src_vocab)
        self.tgt_vocab_ = Vocab(self.tgt_vocab)
        for s, t in zip(X, y):
            for tok in s:
                self.src_vocab_.add(tok)
            for tok in t:
                self.tgt_vocab_.add(tok)
        n_src, V = len(self.src_vocab_), len(self.tgt_vocab_)

        trans = np.zeros((n_src, V))
        bigram = np.zeros((V, V))
        for s, t in zip(X, y):
            sid = self.src_vocab_.encode(s) + [EOS_ID]
            tid = self.tgt_vocab_.encode(t) + [EOS_ID]
            np.add.at(trans, (sid, tid), 1.0)
            np.add.at(bigram, ([BOS_ID] + tid[:-1], tid), 1.0)
        self.translation_table_ = _normalize_counts(trans, self.alpha)
        self.bigram_table_ = _normalize_counts(bigram, self.alpha)

        rng = np.random.default_rng(self.random_state)
        e = self.embed_dim
        self.src_embedding_ = quantize(rng.standard_normal((n_src, e)) / np.sqrt(e) * 4.0)
        self.tgt_embedding_ = quantize(
            rng.standard_normal((V, e)) / np.sqrt(e) * 4.0 * self.context_scale)
        return self

    @property
    def vocab_size(self):
        return len(self.tgt_vocab_)

    @property
    def dim(self):
        return 2 * self.embed_dim

    def encode_source(self, tokens):
        return self.src_vocab_.encode(tokens)

    def encode_target(self, tokens):
        return self.tgt_vocab_.encode(tokens)

    def decode_target(self, ids):
        return self.tgt_vocab_.decode(ids)

    def _source_at(self, src_ids, i):
        return src_ids[i] if i < len(src_ids) else EOS_ID

    def _steps(self, src_at, prev):
        src_at = np.asarray(src_at, dtype=np.int64)
        prev = np.asarray(prev, dtype=np.int64)
        p_m = (self.gamma * self.translation_table_[src_at]
               + (1.0 - self.gamma) * self.bigram_table_[prev])
        q = np.concatenate([self.src_embedding_[src_at], self.tgt_embedding_[prev]], axis=1)
        return q, p_m

    def step(self, src_ids, prefix_ids):
        """Base step at position ``len(prefix_ids)``; past the source end the
        aligned source token is end-of-sequence."""
        check_is_fitted(self, "translation_table_")
        i = len(prefix_ids)
        prev = prefix_ids[-1] if prefix_ids else BOS_ID
        q, p_m = self._steps([self._source_at(src_ids, i)], [prev])
        return BaseStep(p_m[0], q[0])

    def force_decode(self, src_ids, tgt_ids):
        """Queries (L+1, d) and model distributions (L+1, V) along a gold target."""
        check_is_fitted(self, "translation_table_")
        if len(src_ids) != len(tgt_ids):
            raise ValueError("aligned mode needs equal source and target lengths")
        L = len(tgt_ids)
        src_at = list(src_ids) + [EOS_ID]
        prev = [BOS_ID] + list(tgt_ids)
        return self._steps(src_at[:L + 1], prev[:L + 1])


def force_decode_keys(model, src_ids, tgt_ids, domain=None):
    """One datastore record per target position plus the end-of-sequence step."""
    q, _ = model.force_decode(src_ids, tgt_ids)
    gold = list(tgt_ids) + [EOS_ID]
    return [ExampleRecord(q[i], int(gold[i]), domain) for i in range(len(gold))]


def build_toy_base(general_corpus, embed_dim=32, alpha=0.1, gamma=0.7, seed=0,
                   src_vocab=(), tgt_vocab=(), context_scale=1.0):
    if len(general_corpus) == 0:
        raise ValueError("cannot build a base model from an empty corpus")
    model = ToyLexicalModel(tuple(src_vocab), tuple(tgt_vocab), embed_dim, alpha, gamma,
                            context_scale, seed)
    return model.fit(general_corpus.sources, general_corpus.targets)


class ReplayModel:
    """Serves precomputed (query, logits) streams, one per sentence.

    ``src_ids`` in :meth:`force_decode` and :meth:`step` is the sentence
    index in the replay file.
    """

    def __init__(self, vocab_size, dim, sentences):
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        self.sentences = []
        for i, (queries, logits) in enumerate(sentences):
            queries = np.asarray(queries, dtype=np.float32).reshape(-1, self.dim)
            logits = np.asarray(logits, dtype=np.float32).reshape(-1, self.vocab_size)
            if queries.shape[0] != logits.shape[0]:
                raise ValueError(f"sentence {i}: query and logit step counts differ")
            self.sentences.append((queries, logits))

    def __len__(self):
        return len(self.sentences)

    @staticmethod
    def _softmax(logits):
        z = logits.astype(np.float64)
        z = np.exp(z - z.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def force_decode(self, src_ids, tgt_ids):
        queries, logits = self.sentences[int(src_ids)]
        if queries.shape[0] != len(tgt_ids) + 1:
            raise ValueError(
                f"replay sentence {src_ids} has {queries.shape[0]} steps, "
                f"expected target length + 1 = {len(tgt_ids) + 1}")
        return queries, self._softmax(logits)

    def step(self, src_ids, prefix_ids):
        return replay_step(self, int(src_ids), len(prefix_ids))

    def check_compatible(self, ds):
        if ds.dim != self.dim:
            raise ValueError(f"replay dim {self.dim} does not match datastore dim {ds.dim}")


def replay_step(model, sentence, position):
    queries, logits = model.sentences[sentence]
    return BaseStep(model._softmax(logits[position]), queries[position])


def replay_save(model, path):
    with open(path, "wb") as fh:
        fh.write(REPLAY_MAGIC)
        fh.write(struct.pack("<IIIQ", REPLAY_VERSION, model.vocab_size, model.dim, len(model)))
        for queries, logits in model.sentences:
            fh.write(struct.pack("<I", queries.shape[0]))
            fh.write(np.concatenate([queries, logits], axis=1).astype("<f4").tobytes())


def replay_load(path):
    data = Path(path).read_bytes()
    if data[:4] != REPLAY_MAGIC:
        raise ValueError("bad magic, not a replay file")
    head = 4 + struct.calcsize("<IIIQ")
    if len(data) < head:
        raise ValueError("truncated replay file")
    version, V, d, n = struct.unpack("<IIIQ", data[4:head])
    if version != REPLAY_VERSION:
        raise ValueError(f"unsupported replay version {version}")
    pos, sentences = head, []
    for _ in range(n):
        if pos + 4 > len(data):
            raise ValueError("truncated replay file")
        (steps,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        size = steps * (d + V) * 4
        if pos + size > len(data):
            raise ValueError("truncated replay file")
        block = np.frombuffer(data[pos:pos + size], dtype="<f4").reshape(steps, d + V)
        pos += size
        sentences.append((block[:, :d].copy(), block[:, d:].copy()))
    return ReplayModel(V, d, sentences)


def base_save(model, path):
    """Toy model as an ``.npz`` archive (vocabularies, tables, embeddings)."""
    check_is_fitted(model, "translation_table_")
    with open(path, "wb") as fh:
        np.savez(
            fh,
            src_vocab=np.array(model.src_vocab_.to_list(), dtype=str),
            tgt_vocab=np.array(model.tgt_vocab_.to_list(), dtype=str),
            hyper=np.array([model.embed_dim, model.alpha, model.gamma, model.context_scale,
                            model.random_state], dtype=np.float64),
            translation_table=model.translation_table_,
            bigram_table=model.bigram_table_,
            src_embedding=model.src_embedding_,
            tgt_embedding=model.tgt_embedding_,
        )


def base_load(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {name: z[name] for name in z.files}
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read base model {path}: {exc}") from None
    missing = {"src_vocab", "tgt_vocab", "hyper", "translation_table", "bigram_table",
               "src_embedding", "tgt_embedding"} - set(arrays)
    if missing:
        raise ValueError(f"base model file lacks {sorted(missing)}")
    e, alpha, gamma, scale, seed = arrays["hyper"].tolist()
    model = ToyLexicalModel(tuple(arrays["src_vocab"].tolist()),
                            tuple(arrays["tgt_vocab"].tolist()), int(e), alpha, gamma,
                            scale, int(seed))
    model.src_vocab_ = Vocab(model.src_vocab)
    model.tgt_vocab_ = Vocab(model.tgt_vocab)
    model.translation_table_ = arrays["translation_table"]
    model.bigram_table_ = arrays["bigram_table"]
    model.src_embedding_ = arrays["src_embedding"]
    model.tgt_embedding_ = arrays["tgt_embedding"]
    if model.translation_table_.shape != (len(model.src_vocab_), len(model.tgt_vocab_)):
        raise ValueError("base model tables do not match its vocabularies")
    return model
