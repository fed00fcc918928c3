"""Kernel-smoothed translation with example retrieval.

A token-level datastore of (decoder context, next token) pairs is searched at
every decoding step; retrieved neighbors are turned into an example-based
distribution by a kernel whose bandwidth, and the weight mixing it with the
base model, are predicted by a small trainable adapter.
"""
from kster.adapter import (
    AdamState, AdapterParams, adam_update, adapter_init, backward_step, ckpt_load, ckpt_save,
    forward_step, step_loss,
)
from kster.basemodel import ReplayModel, ToyLexicalModel, build_toy_base, force_decode_keys
from kster.corpus import DomainCorpus, Sentence
from kster.kernels import (
    KernelKind, example_distribution, kernel_log_weights, knnmt_distribution, mix,
    normalize_weights,
)
from kster.pipeline import (
    DecodeConfig, KsterTranslator, TrainConfig, beam_decode, build_datastore_from_corpus,
    contrastive_eval, greedy_decode, retrieve_for_inference, retrieve_for_training,
    score_sequence, smoothing_attribution, train_adapter,
)
from kster.vecstore import (
    Datastore, ExampleRecord, KeyValueIndex, Neighbor, ds_build, ds_load, ds_save,
    exact_search, ivfpq_search, ivfpq_train, kmeans,
)

__all__ = [
    "AdamState", "AdapterParams", "Datastore", "DecodeConfig", "DomainCorpus", "ExampleRecord",
    "KernelKind", "KeyValueIndex", "KsterTranslator", "Neighbor", "ReplayModel", "Sentence",
    "ToyLexicalModel", "TrainConfig", "adam_update", "adapter_init", "backward_step",
    "beam_decode", "build_datastore_from_corpus", "build_toy_base", "ckpt_load", "ckpt_save",
    "contrastive_eval", "ds_build", "ds_load", "ds_save", "exact_search",
    "example_distribution", "force_decode_keys", "forward_step", "greedy_decode",
    "ivfpq_search", "ivfpq_train", "kernel_log_weights", "kmeans", "knnmt_distribution", "mix",
    "normalize_weights", "retrieve_for_inference", "retrieve_for_training", "score_sequence",
    "smoothing_attribution", "step_loss", "train_adapter",
]

__version__ = "0.1.0"
