"""Synthetic multi-domain parallel corpus and token-level noise.

The task is position aligned: every source token translates to exactly one
target token. Three kinds of source words exist:

* shared words translate the same way everywhere,
* ambiguous words have one sense per domain; the general domain uses sense 0,
* exclusive words occur in a single domain only (the general domain has its
  own exclusive words too).

A base model trained on general text therefore misses domain senses and has
never seen domain-exclusive words, which is the gap retrieval should close.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from kster.corpus import DomainCorpus, Sentence

GENERAL = "general"
SPLITS = ("train", "dev", "test")
EDA_OPS = ("synonym", "insert", "swap", "delete")


@dataclass(frozen=True)
class SynthTaskConfig:
    n_domains: int = 2
    n_shared: int = 1000
    n_ambiguous: int = 16
    n_exclusive: int = 24
    ambiguity: int = 3
    min_len: int = 5
    max_len: int = 10
    n_train: int = 200
    n_dev: int = 50
    n_test: int = 50
    n_general_train: int = 1500
    p_ambiguous: float = 0.15
    p_ambiguous_general: float = 0.03
    p_exclusive: float = 0.2
    zipf: float = 1.0
    synonym_class_size: int = 3
    seed: int = 0

    def validate(self):
        if self.n_domains < 1:
            raise ValueError("need at least one specific domain")
        if min(self.n_shared, self.n_exclusive) < 1 or self.n_ambiguous < 0:
            raise ValueError("inconsistent vocabulary sizes")
        if self.n_ambiguous and self.ambiguity < 1:
            raise ValueError("ambiguity degree must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("invalid sentence length range")
        if max(self.p_ambiguous, self.p_ambiguous_general) + self.p_exclusive > 1:
            raise ValueError("word-type probabilities exceed 1")
        if self.synonym_class_size < 1:
            raise ValueError("synonym class size must be >= 1")


def domain_names(n_domains):
    return [f"dom{i + 1}" for i in range(n_domains)]


@dataclass
class SynthTask:
    """Generated lexicon plus corpora keyed by ``(domain, split)``."""

    config: SynthTaskConfig
    lexicon: dict          # (domain, source word) -> target word
    source_words: dict     # domain -> {"shared": [...], "ambiguous": [...], "exclusive": [...]}
    token_class: dict      # target word -> class name
    synonyms: dict         # source or target word -> list of words in its class
    corpora: dict

    @property
    def domains(self):
        return domain_names(self.config.n_domains)

    def corpus(self, domain, split):
        return self.corpora[(domain, split)]

    def src_vocab(self):
        words = set()
        for kinds in self.source_words.values():
            for ws in kinds.values():
                words.update(ws)
        return sorted(words)

    def tgt_vocab(self):
        return sorted(self.token_class)

    def translate(self, src, domain):
        return tuple(self.lexicon[(domain, w)] for w in src)

    def sense(self, word, domain):
        return self.lexicon[(domain, word)]

    def metadata(self):
        return {
            "config": asdict(self.config),
            "src_vocab": self.src_vocab(),
            "tgt_vocab": self.tgt_vocab(),
            "token_class": self.token_class,
            "synonyms": self.synonyms,
            "ambiguous": {w: {d: self.lexicon[(d, w)] for d in [GENERAL] + self.domains}
                          for w in self.source_words[GENERAL]["ambiguous"]},
        }


def _synonym_classes(words, size, rng):
    words = list(words)
    order = rng.permutation(len(words))
    classes = {}
    for start in range(0, len(words), size):
        group = [words[i] for i in order[start:start + size]]
        for w in group:
            classes[w] = group
    return classes


def gen_corpus(cfg=None):
    cfg = cfg or SynthTaskConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    domains = domain_names(cfg.n_domains)
    shared = [f"s{i}" for i in range(cfg.n_shared)]
    ambiguous = [f"a{i}" for i in range(cfg.n_ambiguous)]

    lexicon, token_class = {}, {}
    for w in shared:
        token_class["S" + w[1:]] = "shared"
    for w in ambiguous:
        for s in range(cfg.ambiguity):
            token_class[f"A{w[1:]}_{s}"] = "ambiguous"

    source_words = {}
    for di, dom in enumerate([GENERAL] + domains):
        excl = [f"x{di}_{i}" for i in range(cfg.n_exclusive)]
        source_words[dom] = {"shared": shared, "ambiguous": ambiguous, "exclusive": excl}
        for w in shared:
            lexicon[(dom, w)] = "S" + w[1:]
        for w in ambiguous:
            # general keeps sense 0; specific domains cycle through the others
            sense = 0 if di == 0 or cfg.ambiguity == 1 else 1 + (di - 1) % (cfg.ambiguity - 1)
            lexicon[(dom, w)] = f"A{w[1:]}_{sense}"
        for w in excl:
            lexicon[(dom, w)] = "X" + w[1:]
            token_class["X" + w[1:]] = "exclusive"

    synonyms = {}
    for dom in [GENERAL] + domains:
        for kind in ("shared", "ambiguous", "exclusive"):
            ws = source_words[dom][kind]
            if kind == "exclusive" or dom == GENERAL:
                synonyms.update(_synonym_classes(ws, cfg.synonym_class_size, rng))
    by_class = {}
    for t, c in sorted(token_class.items()):
        by_class.setdefault(c, []).append(t)
    for ts in by_class.values():
        synonyms.update(_synonym_classes(ts, cfg.synonym_class_size, rng))

    def zipf_weights(n):
        w = 1.0 / np.arange(1, n + 1) ** cfg.zipf
        return w / w.sum()

    weights = {kind: zipf_weights(len(ws)) for kind, ws in source_words[GENERAL].items() if ws}

    def sentence(dom, sent_rng):
        length = int(sent_rng.integers(cfg.min_len, cfg.max_len + 1))
        src = []
        p_amb = cfg.p_ambiguous_general if dom == GENERAL else cfg.p_ambiguous
        for _ in range(length):
            u = sent_rng.random()
            if u < p_amb and ambiguous:
                kind = "ambiguous"
            elif u < p_amb + cfg.p_exclusive:
                kind = "exclusive"
            else:
                kind = "shared"
            ws = source_words[dom][kind]
            src.append(ws[int(sent_rng.choice(len(ws), p=weights[kind]))])
        return Sentence(tuple(src), tuple(lexicon[(dom, w)] for w in src), dom)

    corpora = {}
    counts = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    for di, dom in enumerate([GENERAL] + domains):
        for si, split in enumerate(SPLITS):
            n = cfg.n_general_train if (dom == GENERAL and split == "train") else counts[split]
            # one stream per (domain, split) so changing one count leaves the rest intact
            sub = np.random.default_rng([cfg.seed, di, si])
            corpora[(dom, split)] = DomainCorpus([sentence(dom, sub) for _ in range(n)])
    return SynthTask(cfg, lexicon, source_words, token_class, synonyms, corpora)


def eda_noise(sentence, p=0.1, seed=0, synonym_classes=None, return_count=False):
    """Perturb each token with probability ``p`` by one of four edits.

    The edit is chosen uniformly among synonym replacement, random insertion
    (a synonym of the token is inserted at a random position), random swap
    with another position, and deletion.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("noise probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    synonym_classes = synonym_classes or {}
    tokens = list(sentence)
    out = list(tokens)
    modified = 0
    # walk the original positions; keep a map to the current output index
    alive = list(range(len(tokens)))
    for i, tok in enumerate(tokens):
        if rng.random() >= p:
            continue
        op = EDA_OPS[int(rng.integers(4))]
        modified += 1
        j = alive.index(i) if i in alive else None
        if j is None:
            continue
        if op == "synonym":
            cls = [w for w in synonym_classes.get(tok, [tok]) if w != tok] or [tok]
            out[j] = cls[int(rng.integers(len(cls)))]
        elif op == "insert":
            cls = synonym_classes.get(tok, [tok])
            pos = int(rng.integers(len(out) + 1))
            out.insert(pos, cls[int(rng.integers(len(cls)))])
            alive.insert(pos, -1)
        elif op == "swap":
            other = int(rng.integers(len(out)))
            out[j], out[other] = out[other], out[j]
            alive[j], alive[other] = alive[other], alive[j]
        else:
            del out[j]
            del alive[j]
    return (out, modified) if return_count else out


def noisy_corpus(corpus, side, p, seed, synonym_classes):
    """EDA noise on one side of every sentence; per-sentence seeds (seed, index)."""
    if side not in ("src", "tgt"):
        raise ValueError("side must be 'src' or 'tgt'")
    out = []
    for i, s in enumerate(corpus):
        src, tgt = list(s.src), list(s.tgt)
        if side == "src":
            src = eda_noise(src, p, [seed, i], synonym_classes)
        else:
            tgt = eda_noise(tgt, p, [seed, i], synonym_classes)
        out.append(Sentence(tuple(src), tuple(tgt), s.domain))
    return DomainCorpus(out)
