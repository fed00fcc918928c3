"""Command line front-end.

Artifact-producing subcommands write the artifact to ``--out`` and their
metrics to stdout (or ``--metrics``). Report subcommands (score, eval,
ablate, attribution) write metrics to ``--out`` or stdout. Metrics are a
JSON list of ``{"metric", "value", "config_hash"}`` objects.

Exit status: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from kster.adapter import ckpt_load, ckpt_save
from kster.basemodel import base_load, base_save, build_toy_base
from kster.corpus import DomainCorpus
from kster.evalbench import harness
from kster.evalbench.config import config_hash, load_config
from kster.evalbench.metrics import bleu, perplexity
from kster.evalbench.synth import GENERAL, gen_corpus, noisy_corpus
from kster.pipeline import (
    DecodeConfig, TrainConfig, build_datastore_from_corpus, constant_params, decode,
    prepare_steps, score_corpus, train_adapter, tune_knnmt,
)
from kster.vecstore import ds_load, ds_save, ivfpq_train

ALL = "all"


class UsageError(Exception):
    pass


# helpers ----------------------------------------------------------------------

def _number(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    value = float(value)
    return value if math.isfinite(value) else None


def emit(metrics, cfg, out=None):
    digest = config_hash(cfg)
    rows = [{"metric": name, "value": _number(value), "config_hash": digest}
            for name, value in metrics.items()]
    text = json.dumps(rows, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def corpus_path(data, domain, split):
    return Path(data) / f"{domain}.{split}.jsonl"


def read_split(data, domain, split):
    """``domain`` may be a name, ``all`` (every specific domain plus general)
    or ``in`` (every specific domain)."""
    meta = json.loads((Path(data) / "task.json").read_text())
    names = meta["domains"]
    if domain == ALL:
        chosen = names + [GENERAL]
    elif domain == "in":
        chosen = names
    elif domain in names + [GENERAL]:
        chosen = [domain]
    else:
        raise UsageError(f"unknown domain {domain!r}; known: {names + [GENERAL]}")
    return sum((DomainCorpus.from_jsonl(corpus_path(data, d, split)) for d in chosen),
               DomainCorpus())


def encode_pairs(base, corpus):
    return [(base.encode_source(s.src), base.encode_target(s.tgt)) for s in corpus]


def load_params(args, base, ds, cfg):
    """Adapter from ``--adapter``, constant kNN-MT from ``--sigma/--lam``, or
    the base model alone when neither is given."""
    if args.adapter:
        params, _ = ckpt_load(args.adapter)
        if params.d != ds.dim:
            raise ValueError(f"adapter dim {params.d} does not match datastore dim {ds.dim}")
        return params
    if args.sigma is not None or args.lam is not None:
        if args.sigma is None or args.lam is None:
            raise UsageError("--sigma and --lam must be given together")
        return constant_params(ds.dim, args.sigma, args.lam, cfg.kernel, cfg.hidden_size)
    return harness.base_only_params(ds.dim, cfg.kernel, cfg.hidden_size)


# subcommands ------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    task = gen_corpus(cfg.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {}
    for (domain, split), corpus in sorted(task.corpora.items()):
        corpus.to_jsonl(corpus_path(out, domain, split))
        metrics[f"sentences_{domain}_{split}"] = len(corpus)
    meta = task.metadata()
    meta["domains"] = task.domains
    (out / "task.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return metrics


def cmd_build_base(args, cfg):
    meta = json.loads((Path(args.data) / "task.json").read_text())
    general = read_split(args.data, GENERAL, "train")
    base = build_toy_base(general, embed_dim=cfg.embed_dim, alpha=cfg.alpha, gamma=cfg.gamma,
                          seed=cfg.task.seed, src_vocab=meta["src_vocab"],
                          tgt_vocab=meta["tgt_vocab"], context_scale=cfg.context_scale)
    base_save(base, args.out)
    return {"vocab_size": base.vocab_size, "dim": base.dim}


def cmd_build_datastore(args, cfg):
    base = base_load(args.base)
    corpus = read_split(args.data, args.domain, "train")
    ds = build_datastore_from_corpus(base, corpus, use_domains=True)
    if args.ivfpq:
        ivfpq_train(ds, nlist=args.nlist, m=args.m, seed=cfg.task.seed,
                    nprobe_default=args.nprobe)
    ds_save(ds, args.out)
    metrics = {"count": ds.count, "dim": ds.dim}
    if ds.index is not None:
        metrics.update(nlist=ds.index.nlist, m=ds.index.m, nprobe=ds.index.nprobe_default)
    return metrics


def cmd_train(args, cfg):
    base = base_load(args.base)
    ds = ds_load(args.datastore)
    train = read_split(args.data, args.domain, "train")
    dev_domain = "in" if args.domain == ALL else args.domain
    dev = prepare_steps(base, ds, read_split(args.data, dev_domain, "dev"), cfg.k)
    sigma, lam, _ = tune_knnmt(dev, ds, cfg.kernel)
    tcfg = TrainConfig(k=cfg.k, retrieval_dropout=not args.no_dropout, epochs=cfg.epochs,
                       batch_tokens=cfg.batch_tokens, lr=cfg.lr, seed=cfg.task.seed,
                       kernel=cfg.kernel, learn_kernel=not args.fix_kernel,
                       learn_weight=not args.fix_weight, hidden=cfg.hidden_size,
                       fixed_bandwidth=sigma, fixed_lambda=lam)
    steps = prepare_steps(base, ds, train, tcfg.k, training=tcfg.retrieval_dropout)
    params, history = train_adapter(base, ds, None, tcfg, steps=steps)
    ckpt_save(params, args.out)
    metrics = {"knnmt_sigma": sigma, "knnmt_lambda": lam, "train_tokens": len(steps)}
    metrics.update({f"train_loss_epoch{i}": v for i, v in enumerate(history)})
    return metrics


def cmd_translate(args, cfg):
    base = base_load(args.base)
    ds = ds_load(args.datastore)
    params = load_params(args, base, ds, cfg)
    corpus = DomainCorpus.from_jsonl(args.input)
    refs = corpus.targets
    if args.noise > 0:
        task_meta = json.loads((Path(args.data) / "task.json").read_text()) if args.data else {}
        corpus = noisy_corpus(corpus, "src", args.noise, cfg.task.seed,
                              task_meta.get("synonyms", {}))
    dcfg = DecodeConfig(mode="beam" if cfg.beam > 1 else "greedy", beam=cfg.beam, k=cfg.k,
                        exact=not args.approximate, nprobe=args.nprobe)
    hyps = [base.decode_target(decode(base, ds, params, base.encode_source(s.src), dcfg))
            for s in corpus]
    DomainCorpus([type(s)(s.src, tuple(h), s.domain) for s, h in zip(corpus, hyps)]
                 ).to_jsonl(args.out)
    return {"bleu": bleu(hyps, refs), "sentences": len(hyps)}


def cmd_score(args, cfg):
    base = base_load(args.base)
    ds = ds_load(args.datastore)
    params = load_params(args, base, ds, cfg)
    pairs = encode_pairs(base, DomainCorpus.from_jsonl(args.input))
    scores = score_corpus(base, ds, params, pairs, cfg.k)
    n_tokens = sum(len(t) + 1 for _, t in pairs)
    return {"log_likelihood": sum(scores), "tokens": n_tokens,
            "perplexity": perplexity(-sum(scores), n_tokens)}


def cmd_eval(args, cfg):
    seeds = [cfg.task.seed + i for i in range(args.seeds)]
    results = [harness.run_seed(cfg, s) for s in seeds]
    summary = harness.summarize(results)
    metrics = dict(summary)
    for name, ok in harness.adaptation_checks(summary).items():
        metrics[f"check_{name}"] = ok
    return metrics


def cmd_ablate(args, cfg):
    bench = harness.setup_bench(cfg)
    mixed = harness.mdmt_setup(bench)
    metrics, _ = harness.run_mdmt(bench, mixed)
    if args.k_sweep:
        ks = [int(k) for k in args.k_sweep.split(",")]
        for k, loss in harness.run_k_sweep(bench, mixed, ks).items():
            metrics[f"k_sweep_loss_k{k}"] = loss
    return metrics


def cmd_attribution(args, cfg):
    bench = harness.setup_bench(cfg)
    mixed = harness.mdmt_setup(bench)
    params = harness.train_cell(bench, mixed)
    metrics = {}
    for name, p in (("knnmt", mixed.knn), ("kster", params)):
        ratios, total = harness.run_attribution(bench, mixed.ds, p, bench.in_domain("test"))
        metrics[f"{name}_steps"] = total
        for cls, ratio in ratios.items():
            metrics[f"{name}_ratio_{cls}"] = ratio
    return metrics


# parser -----------------------------------------------------------------------

def _common(p, out_help):
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--out", default=None, help=out_help)


def _system(p):
    p.add_argument("--base", required=True)
    p.add_argument("--datastore", required=True)
    p.add_argument("--adapter", default=None, help="trained checkpoint")
    p.add_argument("--sigma", type=float, default=None, help="fixed kNN-MT bandwidth")
    p.add_argument("--lam", type=float, default=None, help="fixed kNN-MT mixing weight")


def build_parser():
    parser = argparse.ArgumentParser(prog="kster", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic multi-domain task")
    _common(p, "output directory")
    p.add_argument("--metrics", default=None)

    p = sub.add_parser("build-base", help="count the toy base model on general train data")
    _common(p, "base model file (.npz)")
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default=None)

    p = sub.add_parser("build-datastore", help="force-decode a corpus into a datastore")
    _common(p, "datastore file")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", default=ALL, help="domain name, 'in' or 'all' (mixed)")
    p.add_argument("--ivfpq", action="store_true", help="train an IVF-PQ index")
    p.add_argument("--nlist", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--nprobe", type=int, default=None)
    p.add_argument("--metrics", default=None)

    p = sub.add_parser("train", help="train the bandwidth and mixing-weight adapter")
    _common(p, "adapter checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--datastore", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", default=ALL)
    p.add_argument("--no-dropout", action="store_true")
    p.add_argument("--fix-kernel", action="store_true")
    p.add_argument("--fix-weight", action="store_true")
    p.add_argument("--metrics", default=None)

    p = sub.add_parser("translate", help="decode a JSONL corpus")
    _common(p, "hypotheses JSONL")
    _system(p)
    p.add_argument("--input", required=True)
    p.add_argument("--data", default=None, help="task directory (synonyms for --noise)")
    p.add_argument("--noise", type=float, default=0.0, help="source-side noise probability")
    p.add_argument("--approximate", action="store_true", help="use the IVF-PQ index")
    p.add_argument("--nprobe", type=int, default=None)
    p.add_argument("--metrics", default=None)

    p = sub.add_parser("score", help="forced-decoding log-likelihood and perplexity")
    _common(p, "metrics JSON")
    _system(p)
    p.add_argument("--input", required=True)

    p = sub.add_parser("eval", help="adaptation experiments over several seeds")
    _common(p, "metrics JSON")
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")

    p = sub.add_parser("ablate", help="ablation grid, dropout ablation, optional k sweep")
    _common(p, "metrics JSON")
    p.add_argument("--k-sweep", default=None, help="comma-separated k values")

    p = sub.add_parser("attribution", help="share of gold tokens won by retrieval per class")
    _common(p, "metrics JSON")
    return parser


COMMANDS = {
    "gen-data": (cmd_gen_data, True),
    "build-base": (cmd_build_base, True),
    "build-datastore": (cmd_build_datastore, True),
    "train": (cmd_train, True),
    "translate": (cmd_translate, True),
    "score": (cmd_score, False),
    "eval": (cmd_eval, False),
    "ablate": (cmd_ablate, False),
    "attribution": (cmd_attribution, False),
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    func, makes_artifact = COMMANDS[args.command]
    if makes_artifact and not args.out:
        parser.print_usage(sys.stderr)
        print(f"kster {args.command}: --out is required", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except (ValueError, OSError) as exc:
        print(f"kster {args.command}: bad config: {exc}", file=sys.stderr)
        return 2
    try:
        metrics = func(args, cfg)
        emit(metrics, cfg, args.metrics if makes_artifact else args.out)
    except UsageError as exc:
        print(f"kster {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"kster {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
