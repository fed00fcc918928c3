"""Synthetic task, metrics, experiment harness and command line."""
from kster.evalbench.config import BenchConfig, config_hash, load_config, parse_config
from kster.evalbench.metrics import bleu, paired_bootstrap, perplexity
from kster.evalbench.synth import SynthTask, SynthTaskConfig, eda_noise, gen_corpus, noisy_corpus

__all__ = [
    "BenchConfig", "SynthTask", "SynthTaskConfig", "bleu", "config_hash", "eda_noise",
    "gen_corpus", "load_config", "noisy_corpus", "paired_bootstrap", "parse_config",
    "perplexity",
]
