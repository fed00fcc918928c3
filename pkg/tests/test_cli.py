import json
import subprocess
import sys

import pytest

from conftest import SMALL_CFG, run_cli_chain
from kster.corpus import DomainCorpus
from kster.evalbench.cli import main


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    work = tmp_path_factory.mktemp("chain")
    return work, run_cli_chain(work)


def test_every_step_emits_metric_records(chain):
    _, outputs = chain
    assert set(outputs) == {"gen-data", "build-base", "build-datastore", "train", "translate",
                            "score", "eval", "ablate", "attribution"}
    for name, blob in outputs.items():
        records = json.loads(blob)
        assert records, name
        hashes = {r["config_hash"] for r in records}
        assert len(hashes) == 1 and len(hashes.pop()) == 16
        for r in records:
            assert set(r) == {"metric", "value", "config_hash"}
            assert isinstance(r["value"], (int, float, bool))


def metric(blob, name):
    return {r["metric"]: r["value"] for r in json.loads(blob)}[name]


def test_artifacts_written(chain):
    work, outputs = chain
    for name in ("base.npz", "ds.kstr", "adapter.kadp", "hyp.jsonl", "data/task.json"):
        assert (work / name).stat().st_size > 0
    for dom in ("general", "dom1", "dom2"):
        for split in ("train", "dev", "test"):
            assert (work / f"data/{dom}.{split}.jsonl").exists()
    hyps = DomainCorpus.from_jsonl(work / "hyp.jsonl")
    refs = DomainCorpus.from_jsonl(work / "data/dom1.test.jsonl")
    assert len(hyps) == len(refs) and hyps.sources == refs.sources
    assert 0 <= metric(outputs["translate"], "bleu") <= 100
    assert metric(outputs["score"], "perplexity") >= 1.0


def test_ablate_reports_cells_and_sweep(chain):
    _, outputs = chain
    names = {r["metric"] for r in json.loads(outputs["ablate"])}
    assert {"loss_None", "loss_Kernel", "loss_Weight", "loss_Both", "loss_no_dropout"} <= names
    assert {"k_sweep_loss_k4", "k_sweep_loss_k8"} <= names


def test_metrics_to_stdout(chain, capsys):
    work, _ = chain
    code = main(["score", "--config", str(work / "run.cfg"), "--base", str(work / "base.npz"),
                 "--datastore", str(work / "ds.kstr"), "--sigma", "1.0", "--lam", "0.3",
                 "--input", str(work / "data/dom1.dev.jsonl")])
    assert code == 0
    assert metric(capsys.readouterr().out, "tokens") > 0


def test_noisy_translation(chain):
    work, outputs = chain
    out = work / "noisy.jsonl"
    code = main(["translate", "--config", str(work / "run.cfg"), "--base", str(work / "base.npz"),
                 "--datastore", str(work / "ds.kstr"), "--adapter", str(work / "adapter.kadp"),
                 "--input", str(work / "data/dom1.test.jsonl"), "--data", str(work / "data"),
                 "--noise", "0.3", "--out", str(out), "--metrics", str(work / "noisy.json")])
    assert code == 0
    noisy = metric((work / "noisy.json").read_bytes(), "bleu")
    assert noisy <= metric(outputs["translate"], "bleu")


def test_ivfpq_datastore_and_approximate_decode(chain):
    work, _ = chain
    ds = work / "ivf.kstr"
    assert main(["build-datastore", "--config", str(work / "run.cfg"), "--base",
                 str(work / "base.npz"), "--data", str(work / "data"), "--domain", "in",
                 "--ivfpq", "--nlist", "4", "--m", "4", "--out", str(ds),
                 "--metrics", str(work / "ivf.json")]) == 0
    assert main(["translate", "--config", str(work / "run.cfg"), "--base", str(work / "base.npz"),
                 "--datastore", str(ds), "--sigma", "1", "--lam", "0.5", "--approximate",
                 "--nprobe", "2", "--input", str(work / "data/dom2.test.jsonl"),
                 "--out", str(work / "ivf.jsonl"), "--metrics", str(work / "ivf2.json")]) == 0


# exit codes -----------------------------------------------------------------------

def test_usage_errors_exit_2(tmp_path, chain):
    work, _ = chain
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["gen-data"]) == 2                       # missing --out
    assert main(["build-base", "--out", str(tmp_path / "b.npz")]) == 2   # missing --data
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "missing.cfg"),
                 "--out", str(tmp_path / "d")]) == 2
    cfg = str(work / "run.cfg")
    assert main(["build-datastore", "--config", cfg, "--base", str(work / "base.npz"),
                 "--data", str(work / "data"), "--domain", "dom9",
                 "--out", str(tmp_path / "x.kstr")]) == 2
    assert main(["score", "--config", cfg, "--base", str(work / "base.npz"),
                 "--datastore", str(work / "ds.kstr"), "--sigma", "1.0",
                 "--input", str(work / "data/dom1.test.jsonl")]) == 2


def test_runtime_errors_exit_1(tmp_path, chain):
    work, _ = chain
    cfg = work / "run.cfg"
    assert main(["build-base", "--config", str(cfg), "--data", str(tmp_path / "nothing"),
                 "--out", str(tmp_path / "b.npz")]) == 1
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a model")
    assert main(["score", "--config", str(cfg), "--base", str(junk),
                 "--datastore", str(work / "ds.kstr"), "--input",
                 str(work / "data/dom1.test.jsonl")]) == 1


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL_CFG)
    proc = subprocess.run([sys.executable, "-m", "kster", "gen-data", "--config", str(cfg),
                           "--out", str(tmp_path / "data")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)[0]["metric"]
    proc = subprocess.run([sys.executable, "-m", "kster", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "gen-data" in proc.stdout
