"""Shared generators for test instances."""
from pathlib import Path

import numpy as np
import pytest

from kster.adapter import adapter_init, fix_bandwidth, fix_mixing_weight, forward_step
from kster.kernels import KernelKind

ABLATION_MODES = [(True, True), (True, False), (False, True), (False, False)]


def clustered_vectors(n, dim, n_clusters=64, rank=4, spread=0.5, seed=0, centers=None):
    """Points near low-rank affine patches around random cluster centers.

    Returns ``(points, (centers, bases))`` so held-out queries can be drawn
    from the same mixture.
    """
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = (rng.standard_normal((n_clusters, dim)) * 4.0,
                   rng.standard_normal((n_clusters, dim, rank)) / np.sqrt(rank))
    mu, bases = centers
    label = rng.integers(mu.shape[0], size=n)
    z = rng.standard_normal((n, bases.shape[2])) * spread
    points = mu[label] + np.einsum("nij,nj->ni", bases[label], z)
    return points.astype(np.float32), centers


def adapter_instance(seed, kind=KernelKind.GAUSSIAN, learn_kernel=True, learn_weight=True,
                     d=8, h=8, k=4, V=12, sigma=1.7, lam=0.3, kink_margin=1e-2):
    """Random adapter step ``(params, q, keys, values, dist, p_m, y)``.

    Instances whose MLP pre-activations sit within ``kink_margin`` of the
    ReLU kink are redrawn: finite differences straddling the kink are not a
    gradient of either side.
    """
    rng = np.random.default_rng(seed)
    while True:
        params = adapter_init(d, h, kind, seed=seed)
        params = params.with_vector(rng.normal(0.0, 0.3, params.parameter_count()))
        if not learn_kernel:
            params = fix_bandwidth(params, sigma)
        if not learn_weight:
            params = fix_mixing_weight(params, lam)
        q = rng.normal(size=d)
        keys = rng.normal(size=(k, d))
        values = rng.integers(V, size=k)
        dist = np.linalg.norm(keys - q, axis=1)
        p_m = rng.dirichlet(np.ones(V))
        y = int(values[0]) if seed % 2 else int(rng.integers(V))
        _, tape = forward_step(params, q, keys, values, dist, p_m)
        if not learn_weight or np.abs(tape.cache["a"]).min() > kink_margin:
            return params, q, keys, values, dist, p_m, y


@pytest.fixture(scope="session")
def small_task():
    """Tiny synthetic task, toy base and per-domain stores shared across tests."""
    from kster.basemodel import build_toy_base
    from kster.evalbench.synth import GENERAL, SynthTaskConfig, gen_corpus

    task = gen_corpus(SynthTaskConfig(n_shared=120, n_train=40, n_dev=10, n_test=10,
                                      n_general_train=150, seed=3))
    base = build_toy_base(task.corpus(GENERAL, "train"), alpha=0.01, seed=3,
                          src_vocab=task.src_vocab(), tgt_vocab=task.tgt_vocab(),
                          context_scale=0.5)
    return task, base


SMALL_CFG = """\
# small desk run
n_shared = 200
n_train = 40
n_dev = 10
n_test = 10
n_general_train = 150
epochs = 3
bootstrap_resamples = 100
"""


def run_cli_chain(workdir, seed=0, report=True):
    """Run every subcommand in order inside ``workdir``; returns the metrics
    file of each step keyed by step name."""
    from kster.evalbench.cli import main

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = workdir / "run.cfg"
    cfg.write_text(SMALL_CFG)
    w = lambda name: str(workdir / name)
    common = ["--config", str(cfg), "--seed", str(seed)]
    steps = [
        ("gen-data", ["--out", w("data")]),
        ("build-base", ["--data", w("data"), "--out", w("base.npz")]),
        ("build-datastore", ["--base", w("base.npz"), "--data", w("data"), "--domain", "dom1",
                             "--out", w("ds.kstr")]),
        ("train", ["--base", w("base.npz"), "--datastore", w("ds.kstr"), "--data", w("data"),
                   "--domain", "dom1", "--out", w("adapter.kadp")]),
        ("translate", ["--base", w("base.npz"), "--datastore", w("ds.kstr"),
                       "--adapter", w("adapter.kadp"), "--input", w("data/dom1.test.jsonl"),
                       "--out", w("hyp.jsonl")]),
        ("score", ["--base", w("base.npz"), "--datastore", w("ds.kstr"),
                   "--adapter", w("adapter.kadp"), "--input", w("data/dom1.test.jsonl")]),
    ]
    if report:
        steps += [("eval", ["--seeds", "1"]), ("ablate", ["--k-sweep", "4,8"]),
                  ("attribution", [])]
    outputs = {}
    for name, extra in steps:
        metrics = w(f"{name}.metrics.json")
        flag = "--metrics" if "--out" in extra else "--out"
        code = main([name, *common, *extra, flag, metrics])
        assert code == 0, f"{name} exited with {code}"
        outputs[name] = Path(metrics).read_bytes()
    return outputs


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
