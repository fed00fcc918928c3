"""Parallel corpora with domain labels, vocabularies, and the JSONL format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

UNK, BOS, EOS = "<unk>", "<s>", "</s>"
SPECIALS = (UNK, BOS, EOS)
UNK_ID, BOS_ID, EOS_ID = 0, 1, 2


class Vocab:
    """String <-> id table; ids 0..2 are reserved for unk, bos and eos."""

    def __init__(self, tokens=()):
        self.itos = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens):
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids if i not in (BOS_ID, EOS_ID)]

    def to_list(self):
        return list(self.itos[len(SPECIALS):])


@dataclass(frozen=True)
class Sentence:
    src: tuple
    tgt: tuple
    domain: str = "general"


@dataclass
class DomainCorpus:
    sentences: list = field(default_factory=list)

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    @property
    def domains(self):
        return sorted({s.domain for s in self.sentences})

    @property
    def sources(self):
        return [list(s.src) for s in self.sentences]

    @property
    def targets(self):
        return [list(s.tgt) for s in self.sentences]

    def n_target_tokens(self):
        return sum(len(s.tgt) for s in self.sentences)

    def filter(self, domain):
        return DomainCorpus([s for s in self.sentences if s.domain == domain])

    def __add__(self, other):
        return DomainCorpus(self.sentences + other.sentences)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for s in self.sentences:
                fh.write(json.dumps({"src": list(s.src), "tgt": list(s.tgt),
                                     "domain": s.domain}) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        sentences = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                sentences.append(Sentence(tuple(obj["src"]), tuple(obj["tgt"]),
                                          obj.get("domain", "general")))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
        return cls(sentences)
