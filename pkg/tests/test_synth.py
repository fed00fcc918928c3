import math
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kster.corpus import DomainCorpus
from kster.evalbench.config import (
    BenchConfig, config_hash, dump_config, load_config, parse_config,
)
from kster.evalbench.harness import base_only_params
from kster.evalbench.synth import (
    GENERAL, SPLITS, SynthTaskConfig, domain_names, eda_noise, gen_corpus, noisy_corpus,
)
from kster.pipeline import build_datastore_from_corpus, score_corpus

SMALL = SynthTaskConfig(n_shared=80, n_train=100, n_dev=20, n_test=30, n_general_train=120,
                        seed=5)


@pytest.fixture(scope="module")
def task():
    return gen_corpus(SMALL)


def test_split_counts(task):
    for dom in task.domains:
        assert [len(task.corpus(dom, s)) for s in SPLITS] == [100, 20, 30]
    assert len(task.corpus(GENERAL, "train")) == 120
    assert task.domains == domain_names(2) == ["dom1", "dom2"]


def test_sentences_are_aligned_and_tagged(task):
    for (dom, _), corpus in task.corpora.items():
        for s in corpus:
            assert len(s.src) == len(s.tgt)
            assert SMALL.min_len <= len(s.src) <= SMALL.max_len
            assert s.domain == dom
            assert s.tgt == task.translate(s.src, dom)


def test_deterministic_per_seed(task):
    again = gen_corpus(SMALL)
    assert again.corpora == task.corpora and again.synonyms == task.synonyms
    other = gen_corpus(replace(SMALL, seed=6))
    assert other.corpus("dom1", "train").sentences != task.corpus("dom1", "train").sentences


def test_ambiguous_senses_differ_per_domain(task):
    for w in task.source_words[GENERAL]["ambiguous"]:
        senses = [task.sense(w, d) for d in [GENERAL] + task.domains]
        assert len(set(senses)) == len(senses)
        assert senses[0].endswith("_0")


def test_ambiguity_one_shares_translations():
    t = gen_corpus(replace(SMALL, ambiguity=1))
    for w in t.source_words[GENERAL]["ambiguous"]:
        assert len({t.sense(w, d) for d in [GENERAL] + t.domains}) == 1


def test_exclusive_words_stay_in_their_domain(task):
    for (dom, _), corpus in task.corpora.items():
        foreign = {w for d, kinds in task.source_words.items() if d != dom
                   for w in kinds["exclusive"]}
        assert not foreign.intersection(w for s in corpus for w in s.src)


def test_vocab_covers_corpora(task):
    src, tgt = set(task.src_vocab()), set(task.tgt_vocab())
    for corpus in task.corpora.values():
        for s in corpus:
            assert set(s.src) <= src and set(s.tgt) <= tgt


@pytest.mark.parametrize("bad", [
    dict(n_domains=0), dict(n_shared=0), dict(min_len=5, max_len=3),
    dict(p_ambiguous=0.9, p_exclusive=0.2), dict(ambiguity=0), dict(synonym_class_size=0),
])
def test_inconsistent_config_rejected(bad):
    with pytest.raises(ValueError):
        gen_corpus(replace(SMALL, **bad))


def test_base_perplexity_higher_in_domain(small_task):
    task, base = small_task
    empty = build_datastore_from_corpus(base, DomainCorpus())
    params = base_only_params(empty.dim)

    def ppl(corpus):
        pairs = [(base.encode_source(s.src), base.encode_target(s.tgt)) for s in corpus]
        scores = score_corpus(base, empty, params, pairs)
        return math.exp(-sum(scores) / sum(len(t) + 1 for _, t in pairs))

    general = ppl(task.corpus(GENERAL, "test"))
    for dom in task.domains:
        assert ppl(task.corpus(dom, "test")) > general


# noise --------------------------------------------------------------------------

@given(st.lists(st.text(min_size=1, max_size=3), max_size=15), st.integers(0, 2**32 - 1))
def test_zero_noise_is_identity(tokens, seed):
    assert eda_noise(tokens, 0.0, seed) == tokens


def test_modified_fraction_near_p(task):
    tokens = [f"s{i % 80}" for i in range(10_000)]
    modified = 0
    for start in range(0, len(tokens), 10):
        _, n = eda_noise(tokens[start:start + 10], 0.1, [7, start], task.synonyms,
                         return_count=True)
        modified += n
    assert 0.08 <= modified / len(tokens) <= 0.12


def test_single_token_deletion_allowed():
    outputs = {tuple(eda_noise(["w"], 1.0, seed, {"w": ["w", "v"]})) for seed in range(50)}
    assert () in outputs
    assert ("v",) in outputs


def test_synonym_replacement_stays_in_class(task):
    src = list(task.corpus("dom1", "test").sentences[0].src)
    allowed = {v for w in src for v in task.synonyms[w]}
    for seed in range(30):
        assert set(eda_noise(src, 1.0, seed, task.synonyms)) <= allowed


def test_noise_probability_validated():
    with pytest.raises(ValueError):
        eda_noise(["a"], 1.5)
    with pytest.raises(ValueError):
        eda_noise(["a"], -0.1)
    assert eda_noise([], 0.5) == []


def test_noisy_corpus_one_side(task):
    corpus = task.corpus("dom1", "test")
    noisy = noisy_corpus(corpus, "src", 0.3, 0, task.synonyms)
    assert noisy.targets == corpus.targets and noisy.sources != corpus.sources
    assert noisy_corpus(corpus, "src", 0.3, 0, task.synonyms).sources == noisy.sources
    with pytest.raises(ValueError):
        noisy_corpus(corpus, "both", 0.3, 0, task.synonyms)


# config -----------------------------------------------------------------------

def test_config_round_trip():
    cfg = parse_config("# comment\nn_train = 20\nkernel = laplacian  # inline\nlr=0.01\n")
    assert cfg.task.n_train == 20 and cfg.kernel == "laplacian" and cfg.lr == 0.01
    assert parse_config(dump_config(cfg)) == cfg
    assert load_config() == BenchConfig()


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 3\nseed = 9\n")
    cfg = load_config(path)
    assert cfg.epochs == 3 and cfg.task.seed == 9


@pytest.mark.parametrize("text", [
    "bogus = 1", "epochs = three", "epochs = 0", "epochs", "k = 4\nk = 5", "kernel = cosine",
    "noise_p = 2",
])
def test_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_config_hash():
    cfg = BenchConfig()
    h = config_hash(cfg)
    assert len(h) == 16 and int(h, 16) >= 0
    assert config_hash(BenchConfig()) == h
    assert config_hash(cfg.with_seed(1)) != h
    assert config_hash(replace(cfg, epochs=cfg.epochs + 1)) != h
    assert BenchConfig(hidden=0).hidden_size is None and BenchConfig(hidden=8).hidden_size == 8
