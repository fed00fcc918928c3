import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kster.basemodel import (
    ReplayModel, ToyLexicalModel, base_load, base_save, build_toy_base, force_decode_keys,
    replay_load, replay_save, replay_step,
)
from kster.corpus import BOS_ID, EOS_ID, UNK_ID, DomainCorpus, Sentence, Vocab
from kster.evalbench.synth import GENERAL
from kster.vecstore import ds_build, ds_from_arrays, exact_search


def corpus_of(pairs, domain="general"):
    return DomainCorpus([Sentence(tuple(s), tuple(t), domain) for s, t in pairs])


def test_single_pair_unsmoothed():
    base = build_toy_base(corpus_of([(["a"], ["X"])]), alpha=0.0)
    a = base.encode_source(["a"])[0]
    x = base.encode_target(["X"])[0]
    assert base.translation_table_[a, x] == 1.0


def test_heavy_smoothing_is_uniform():
    base = build_toy_base(corpus_of([(["a", "b"], ["X", "Y"])]), alpha=1e12)
    V = base.vocab_size
    np.testing.assert_allclose(base.translation_table_, 1.0 / V, rtol=1e-9)
    np.testing.assert_allclose(base.bigram_table_, 1.0 / V, rtol=1e-9)


def test_tables_are_row_stochastic(small_task):
    _, base = small_task
    np.testing.assert_allclose(base.translation_table_.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(base.bigram_table_.sum(axis=1), 1.0, atol=1e-9)


def test_training_perplexity_below_uniform(small_task):
    task, base = small_task
    nll, n = 0.0, 0
    for s in task.corpus(GENERAL, "train"):
        src, tgt = base.encode_source(s.src), base.encode_target(s.tgt)
        _, p_m = base.force_decode(src, tgt)
        gold = tgt + [EOS_ID]
        nll -= np.log(p_m[np.arange(len(gold)), gold]).sum()
        n += len(gold)
    ppl = np.exp(nll / n)
    assert np.isfinite(ppl) and ppl < base.vocab_size


def test_gamma_one_ignores_prefix(small_task):
    task, _ = small_task
    base = build_toy_base(task.corpus(GENERAL, "train"), gamma=1.0, seed=3)
    src = base.encode_source(task.corpus(GENERAL, "test").sentences[0].src)
    a = base.step(src, [5, 6]).p_m
    b = base.step(src, [9, 3]).p_m
    assert np.array_equal(a, b)


def test_step_is_markov(small_task):
    _, base = small_task
    src = [5, 6, 7, 8]
    a = base.step(src, [11, 12, 13])
    b = base.step(src, [40, 41, 13])
    assert np.array_equal(a.p_m, b.p_m) and np.array_equal(a.q, b.q)
    assert a.q.shape == (base.dim,) and base.dim == 2 * base.embed_dim
    assert abs(a.p_m.sum() - 1) < 1e-9


def test_first_step_uses_bos_embedding(small_task):
    _, base = small_task
    step = base.step([5], [])
    assert np.array_equal(step.q[base.embed_dim:], base.tgt_embedding_[BOS_ID])


def test_past_source_end_aligns_to_eos(small_task):
    _, base = small_task
    step = base.step([5], [9])
    assert np.array_equal(step.q[:base.embed_dim], base.src_embedding_[EOS_ID])


def test_unknown_tokens_map_to_unk(small_task):
    _, base = small_task
    assert base.encode_source(["never-seen"]) == [UNK_ID]
    assert base.decode_target([BOS_ID, 5, EOS_ID]) == [base.tgt_vocab_.itos[5]]


def test_force_decode_matches_steps(small_task):
    task, base = small_task
    s = task.corpus("dom1", "train").sentences[0]
    src, tgt = base.encode_source(s.src), base.encode_target(s.tgt)
    q, p_m = base.force_decode(src, tgt)
    assert q.shape == (len(tgt) + 1, base.dim)
    for i in range(len(tgt) + 1):
        step = base.step(src, tgt[:i])
        assert np.array_equal(step.q, q[i]) and np.array_equal(step.p_m, p_m[i])


def test_force_decode_keys(small_task):
    task, base = small_task
    s = task.corpus("dom1", "train").sentences[0]
    src, tgt = base.encode_source(s.src), base.encode_target(s.tgt)
    recs = force_decode_keys(base, src, tgt, domain=2)
    assert len(recs) == len(tgt) + 1
    assert [r.value for r in recs] == tgt + [EOS_ID]
    again = force_decode_keys(base, src, tgt, domain=2)
    assert all(np.array_equal(a.key, b.key) and a.value == b.value for a, b in zip(recs, again))
    with pytest.raises(ValueError):
        force_decode_keys(base, src, tgt[:-1])


def test_self_retrieval_at_distance_zero(small_task):
    task, base = small_task
    records = []
    for s in task.corpus("dom1", "train"):
        records += force_decode_keys(base, base.encode_source(s.src), base.encode_target(s.tgt))
    ds = ds_build(records, base.dim)
    for rec in records[::7]:
        assert exact_search(ds, rec.key, 1)[0].distance == 0.0


def test_build_errors():
    with pytest.raises(ValueError):
        build_toy_base(DomainCorpus())
    with pytest.raises(ValueError):
        build_toy_base(corpus_of([([], [])]))
    with pytest.raises(ValueError):
        build_toy_base(corpus_of([(["a"], ["X", "Y"])]))


def test_build_is_deterministic(small_task):
    task, _ = small_task
    a = build_toy_base(task.corpus(GENERAL, "train"), seed=5)
    b = build_toy_base(task.corpus(GENERAL, "train"), seed=5)
    assert np.array_equal(a.src_embedding_, b.src_embedding_)
    assert np.array_equal(a.translation_table_, b.translation_table_)


def test_estimator_params(small_task):
    _, base = small_task
    params = base.get_params()
    assert params["embed_dim"] == 32 and params["alpha"] == 0.01
    assert isinstance(base, ToyLexicalModel)


def test_base_save_load(tmp_path, small_task):
    _, base = small_task
    base_save(base, tmp_path / "b.npz")
    back = base_load(tmp_path / "b.npz")
    for name in ("translation_table_", "bigram_table_", "src_embedding_", "tgt_embedding_"):
        assert np.array_equal(getattr(back, name), getattr(base, name))
    assert back.tgt_vocab_.itos == base.tgt_vocab_.itos
    a, b = base.step([4, 5], [7]), back.step([4, 5], [7])
    assert np.array_equal(a.p_m, b.p_m) and np.array_equal(a.q, b.q)
    (tmp_path / "junk.npz").write_bytes(b"junk")
    with pytest.raises(ValueError):
        base_load(tmp_path / "junk.npz")


# replay model --------------------------------------------------------------------

def _replay(seed=0, V=7, d=4, lengths=(2, 3)):
    rng = np.random.default_rng(seed)
    return ReplayModel(V, d, [(rng.normal(size=(L + 1, d)), rng.normal(size=(L + 1, V)))
                              for L in lengths])


def test_replay_roundtrip(tmp_path):
    model = _replay()
    replay_save(model, tmp_path / "r.krpl")
    back = replay_load(tmp_path / "r.krpl")
    assert (back.vocab_size, back.dim, len(back)) == (7, 4, 2)
    for (qa, la), (qb, lb) in zip(model.sentences, back.sentences):
        assert np.array_equal(qa, qb) and np.array_equal(la, lb)
    q, p_m = back.force_decode(1, [3, 4, 5])
    assert q.shape == (4, 4)
    np.testing.assert_allclose(p_m.sum(axis=1), 1.0)
    step = replay_step(back, 1, 2)
    assert np.array_equal(step.q, q[2]) and np.allclose(step.p_m, p_m[2])
    assert np.array_equal(back.step(1, [3, 4]).q, q[2])


def test_replay_errors(tmp_path):
    model = _replay()
    with pytest.raises(ValueError):
        model.force_decode(0, [1, 2, 3])
    with pytest.raises(ValueError):
        model.check_compatible(ds_from_arrays(np.zeros((1, 5)), [0]))
    model.check_compatible(ds_from_arrays(np.zeros((1, 4)), [0]))
    with pytest.raises(ValueError):
        ReplayModel(3, 2, [(np.zeros((2, 2)), np.zeros((3, 3)))])
    replay_save(model, tmp_path / "r")
    raw = (tmp_path / "r").read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        replay_load(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(ValueError):
        replay_load(tmp_path / "short")


def test_replay_header(tmp_path):
    replay_save(_replay(lengths=(1,)), tmp_path / "r")
    raw = (tmp_path / "r").read_bytes()
    assert raw[:4] == b"KRPL"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 7, 4]
    assert int.from_bytes(raw[16:24], "little") == 1
    assert int.from_bytes(raw[24:28], "little") == 2
    assert len(raw) == 28 + 2 * (4 + 7) * 4


# corpus and vocab ------------------------------------------------------------------

def test_vocab_reserved_ids():
    v = Vocab(["x", "y", "x"])
    assert len(v) == 5 and v.encode(["y", "z"]) == [4, UNK_ID]
    assert v.to_list() == ["x", "y"]


@settings(max_examples=30)
@given(st.lists(st.tuples(st.lists(st.text(min_size=1, max_size=4), min_size=1, max_size=5),
                          st.sampled_from(["general", "dom1", "dom 2"])), max_size=6))
def test_jsonl_roundtrip(tmp_path_factory, rows):
    corpus = DomainCorpus([Sentence(tuple(t), tuple(reversed(t)), d) for t, d in rows])
    path = tmp_path_factory.mktemp("c") / "c.jsonl"
    corpus.to_jsonl(path)
    assert DomainCorpus.from_jsonl(path).sentences == corpus.sentences


def test_jsonl_missing_field(tmp_path):
    (tmp_path / "c.jsonl").write_text('{"src": ["a"]}\n')
    with pytest.raises(ValueError, match="tgt"):
        DomainCorpus.from_jsonl(tmp_path / "c.jsonl")


def test_corpus_helpers():
    c = corpus_of([(["a"], ["X"])], "d1") + corpus_of([(["b", "c"], ["Y", "Z"])], "d2")
    assert c.domains == ["d1", "d2"] and c.n_target_tokens() == 3
    assert len(c.filter("d2")) == 1
