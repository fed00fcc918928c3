"""Desk-scale experiments on the synthetic task.

DAMT: one store per specific domain, domain known at test time.
MDMT: one mixed store over every domain (general included), domain unknown.
Perplexities and losses come from the batched teacher-forced path
(:func:`kster.pipeline.step_losses`), which matches ``score_sequence``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from kster.adapter import batch_loss
from kster.basemodel import build_toy_base
from kster.corpus import DomainCorpus, EOS
from kster.evalbench.metrics import bleu, paired_bootstrap
from kster.evalbench.synth import GENERAL, gen_corpus, noisy_corpus
from kster.pipeline import (
    DecodeConfig, TrainConfig, build_datastore_from_corpus, constant_params, contrastive_eval,
    decode, mean_loss, prepare_steps, smoothing_attribution, train_adapter,
    tune_knnmt,
)

ABLATION_CELLS = {
    # name: (learn_kernel, learn_weight)
    "None": (False, False),
    "Kernel": (True, False),
    "Weight": (False, True),
    "Both": (True, True),
}


@dataclass
class Bench:
    cfg: object
    task: object
    base: object

    @property
    def seed(self):
        return self.cfg.task.seed

    def corpus(self, domain, split):
        return self.task.corpus(domain, split)

    def in_domain(self, split):
        return sum((self.corpus(d, split) for d in self.task.domains), DomainCorpus())

    def train_config(self, **overrides):
        cfg = self.cfg
        kw = dict(k=cfg.k, epochs=cfg.epochs, batch_tokens=cfg.batch_tokens, lr=cfg.lr,
                  seed=self.seed, kernel=cfg.kernel, hidden=cfg.hidden_size)
        kw.update(overrides)
        return TrainConfig(**kw)


def setup_bench(cfg):
    cfg.validate()
    task = gen_corpus(cfg.task)
    base = build_toy_base(task.corpus(GENERAL, "train"), embed_dim=cfg.embed_dim,
                          alpha=cfg.alpha, gamma=cfg.gamma, seed=cfg.task.seed,
                          src_vocab=task.src_vocab(), tgt_vocab=task.tgt_vocab(),
                          context_scale=cfg.context_scale)
    return Bench(cfg, task, base)


def _ppl(loss):
    return float(math.exp(loss))


def base_loss(steps):
    return float(np.mean(batch_loss(steps.p_model_gold)))


def tuned_knnmt(bench, ds, dev_steps):
    sigma, lam, _ = tune_knnmt(dev_steps, ds, bench.cfg.kernel)
    return constant_params(ds.dim, sigma, lam, bench.cfg.kernel, bench.cfg.hidden_size), sigma, lam


def run_damt(bench):
    """Per-domain perplexities of base, dev-tuned kNN-MT and KSTER.

    Returns ``{domain: {name: value}}`` with in-domain and general-domain
    test perplexities for each system.
    """
    k = bench.cfg.k
    general_test = bench.corpus(GENERAL, "test")
    out = {}
    for dom in bench.task.domains:
        train = bench.corpus(dom, "train")
        ds = build_datastore_from_corpus(bench.base, train)
        dev = prepare_steps(bench.base, ds, bench.corpus(dom, "dev"), k)
        test = prepare_steps(bench.base, ds, bench.corpus(dom, "test"), k)
        gen = prepare_steps(bench.base, ds, general_test, k)
        knn, sigma, lam = tuned_knnmt(bench, ds, dev)
        cfg = bench.train_config(fixed_bandwidth=sigma, fixed_lambda=lam)
        params, history = train_adapter(bench.base, ds, train, cfg)
        out[dom] = {
            "base_in": _ppl(base_loss(test)),
            "knnmt_in": _ppl(mean_loss(knn, test, ds)),
            "kster_in": _ppl(mean_loss(params, test, ds)),
            "base_general": _ppl(base_loss(gen)),
            "knnmt_general": _ppl(mean_loss(knn, gen, ds)),
            "kster_general": _ppl(mean_loss(params, gen, ds)),
            "knnmt_sigma": sigma,
            "knnmt_lambda": lam,
            "train_loss_first": history[0],
            "train_loss_last": history[-1],
        }
    return out


@dataclass
class MixedSetup:
    ds: object
    train_steps: object        # training-mode retrieval (dropout on)
    train_steps_nodrop: object
    dev: object
    test: object
    general_test: object
    knn: object
    sigma: float
    lam: float


def mdmt_setup(bench):
    k = bench.cfg.k
    train = bench.in_domain("train") + bench.corpus(GENERAL, "train")
    ds = build_datastore_from_corpus(bench.base, train)
    dev = prepare_steps(bench.base, ds, bench.in_domain("dev"), k)
    knn, sigma, lam = tuned_knnmt(bench, ds, dev)
    return MixedSetup(
        ds=ds,
        train_steps=prepare_steps(bench.base, ds, train, k, training=True),
        train_steps_nodrop=prepare_steps(bench.base, ds, train, k, training=False),
        dev=dev,
        test=prepare_steps(bench.base, ds, bench.in_domain("test"), k),
        general_test=prepare_steps(bench.base, ds, bench.corpus(GENERAL, "test"), k),
        knn=knn, sigma=sigma, lam=lam,
    )


def train_cell(bench, mixed, learn_kernel=True, learn_weight=True, dropout=True):
    cfg = bench.train_config(learn_kernel=learn_kernel, learn_weight=learn_weight,
                             retrieval_dropout=dropout, fixed_bandwidth=mixed.sigma,
                             fixed_lambda=mixed.lam)
    steps = mixed.train_steps if dropout else mixed.train_steps_nodrop
    params, _ = train_adapter(bench.base, mixed.ds, None, cfg, steps=steps)
    return params


def run_mdmt(bench, mixed=None):
    """Ablation grid and dropout ablation on the mixed store.

    Losses are mean in-domain test negative log-likelihoods. ``None`` is the
    dev-tuned kNN-MT; the frozen half of ``Kernel``/``Weight`` uses its
    constants.
    """
    mixed = mixed or mdmt_setup(bench)
    losses, params = {}, {}
    for name, (lk, lw) in ABLATION_CELLS.items():
        params[name] = mixed.knn if name == "None" else train_cell(bench, mixed, lk, lw)
        losses[name] = mean_loss(params[name], mixed.test, mixed.ds)
    nodrop = train_cell(bench, mixed, dropout=False)
    out = {f"loss_{name}": value for name, value in losses.items()}
    out.update({
        "loss_no_dropout": mean_loss(nodrop, mixed.test, mixed.ds),
        "loss_base": base_loss(mixed.test),
        "general_loss_Both": mean_loss(params["Both"], mixed.general_test, mixed.ds),
        "general_loss_base": base_loss(mixed.general_test),
        "knnmt_sigma": mixed.sigma,
        "knnmt_lambda": mixed.lam,
    })
    return out, params


def base_only_params(dim, kind="gaussian", hidden=None):
    """Adapter with the mixing weight pinned to exactly 0 (p = p_m)."""
    return constant_params(dim, 1.0, 0.0, kind, hidden)


def contrastive_pairs(bench, split="test"):
    """One item per in-domain sentence with an ambiguous word: the reference
    keeps the domain sense at the first ambiguous position, each contrastive
    variant swaps in another sense."""
    task, base = bench.task, bench.base
    all_senses = {w: [f"A{w[1:]}_{s}" for s in range(task.config.ambiguity)]
                  for w in task.source_words[GENERAL]["ambiguous"]}
    items = []
    for dom in task.domains:
        for sent in task.corpus(dom, split):
            pos = next((i for i, w in enumerate(sent.src) if w in all_senses), None)
            if pos is None:
                continue
            ref = list(sent.tgt)
            variants = []
            for other in all_senses[sent.src[pos]]:
                if other != ref[pos]:
                    variant = list(ref)
                    variant[pos] = other
                    variants.append(base.encode_target(variant))
            if variants:
                items.append((base.encode_source(sent.src), base.encode_target(ref), variants))
    return items


def run_wsd(bench, mixed, kster_params):
    items = contrastive_pairs(bench)
    k = bench.cfg.k
    base_params = base_only_params(mixed.ds.dim, bench.cfg.kernel, bench.cfg.hidden_size)
    return {
        "n_items": len(items),
        "acc_base": contrastive_eval(bench.base, mixed.ds, base_params, items, k),
        "acc_knnmt": contrastive_eval(bench.base, mixed.ds, mixed.knn, items, k),
        "acc_kster": contrastive_eval(bench.base, mixed.ds, kster_params, items, k),
    }


def category_lookup(bench):
    itos = bench.base.tgt_vocab_.itos

    def category_of(token_id):
        tok = itos[token_id]
        return "eos" if tok == EOS else bench.task.token_class.get(tok, "other")

    return category_of


def run_attribution(bench, ds, params, corpus):
    pairs = [(bench.base.encode_source(s.src), bench.base.encode_target(s.tgt)) for s in corpus]
    return smoothing_attribution(bench.base, ds, params, pairs, category_lookup(bench),
                                 bench.cfg.k)


def run_k_sweep(bench, mixed, ks=(1, 4, 8, 16, 32)):
    """In-domain test loss of KSTER trained and evaluated with each k."""
    out = {}
    train = bench.in_domain("train") + bench.corpus(GENERAL, "train")
    for k in ks:
        cfg = bench.train_config(k=k, fixed_bandwidth=mixed.sigma, fixed_lambda=mixed.lam)
        params, _ = train_adapter(bench.base, mixed.ds, train, cfg)
        test = prepare_steps(bench.base, mixed.ds, bench.in_domain("test"), k)
        out[k] = mean_loss(params, test, mixed.ds)
    return out


def translate_corpus(bench, ds, params, corpus):
    dcfg = DecodeConfig(mode="beam" if bench.cfg.beam > 1 else "greedy",
                        beam=bench.cfg.beam, k=bench.cfg.k)
    base = bench.base
    return [base.decode_target(decode(base, ds, params, base.encode_source(s.src), dcfg))
            for s in corpus]


def run_robustness(bench, mixed, kster_params, n_sentences=None):
    """BLEU on clean and source-noised in-domain test sets, KSTER vs kNN-MT."""
    test = bench.in_domain("test")
    if n_sentences is not None:
        test = DomainCorpus(test.sentences[:n_sentences])
    noisy = noisy_corpus(test, "src", bench.cfg.noise_p, bench.seed, bench.task.synonyms)
    refs = test.targets
    out = {}
    for tag, corpus in (("clean", test), ("noisy", noisy)):
        hyp_k = translate_corpus(bench, mixed.ds, kster_params, corpus)
        hyp_n = translate_corpus(bench, mixed.ds, mixed.knn, corpus)
        out[f"bleu_{tag}_kster"] = bleu(hyp_k, refs)
        out[f"bleu_{tag}_knnmt"] = bleu(hyp_n, refs)
        out[f"bootstrap_p_{tag}"] = paired_bootstrap(
            hyp_k, hyp_n, refs, bench.cfg.bootstrap_resamples, bench.seed)
    return out


def run_seed(cfg, seed, wsd=True):
    """DAMT, MDMT (ablation + dropout) and contrastive WSD for one seed."""
    bench = setup_bench(cfg.with_seed(seed))
    result = {"damt": run_damt(bench)}
    mixed = mdmt_setup(bench)
    result["mdmt"], params = run_mdmt(bench, mixed)
    if wsd:
        result["wsd"] = run_wsd(bench, mixed, params["Both"])
    return result


def summarize(results):
    """Seed means of the quantities the adaptation checks compare."""
    def mean(values):
        return float(np.mean(list(values)))

    damt = [r["damt"][d] for r in results for d in r["damt"]]
    out = {
        "base_in_ppl": mean(x["base_in"] for x in damt),
        "knnmt_in_ppl": mean(x["knnmt_in"] for x in damt),
        "kster_in_ppl": mean(x["kster_in"] for x in damt),
        "base_general_ppl": mean(x["base_general"] for x in damt),
        "knnmt_general_ppl": mean(x["knnmt_general"] for x in damt),
        "kster_general_ppl": mean(x["kster_general"] for x in damt),
    }
    out["knnmt_general_degradation"] = out["knnmt_general_ppl"] - out["base_general_ppl"]
    out["kster_general_degradation"] = out["kster_general_ppl"] - out["base_general_ppl"]
    for key in results[0]["mdmt"]:
        out[f"mdmt_{key}"] = mean(r["mdmt"][key] for r in results)
    if all("wsd" in r for r in results):
        for key in ("acc_base", "acc_knnmt", "acc_kster"):
            out[f"wsd_{key}"] = mean(r["wsd"][key] for r in results)
    return out


def adaptation_checks(summary, tolerance=0.02):
    """Directional claims as booleans keyed by short names."""
    s = summary
    both, kern, weight, none = (s["mdmt_loss_Both"], s["mdmt_loss_Kernel"],
                                s["mdmt_loss_Weight"], s["mdmt_loss_None"])
    checks = {
        "in_domain_gain": s["kster_in_ppl"] < s["base_in_ppl"],
        "general_degradation": s["kster_general_degradation"] <= s["knnmt_general_degradation"],
        "dropout_helps": s["mdmt_loss_no_dropout"] > s["mdmt_loss_Both"],
        "ablation_order": both <= min(kern, weight) <= none * (1 + tolerance),
    }
    if "wsd_acc_kster" in s:
        checks["wsd"] = s["wsd_acc_kster"] >= s["wsd_acc_base"]
    return checks
