"""In-context named entity recognition as text-to-text extraction, with
meta-function pre-training and episodic few-shot evaluation."""

__version__ = "0.1.0"

from .corpus import (
    EntityMention,
    NerInstance,
    SyntheticCorpusSpec,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    split_by_types,
)
from .sampler import InContextTask, SamplerConfig, anonymize_types, sample_task
from .codec import (
    NIL_RENDERING,
    IN_CONTEXT,
    TRADITIONAL,
    Vocabulary,
    linearize,
    tokenize_example,
    parse_extractions,
    locate_mentions,
)
from .model import ModelConfig, ModelParams, encode, generate, sequence_nll
from .train import TrainConfig, meta_function_loss, pretrain, surrogate_step, finetune
from .evaluate import build_kshot_episode, evaluate_in_context, measure_meta_gap, micro_f1

__all__ = [
    "__version__",
    "EntityMention",
    "NerInstance",
    "SyntheticCorpusSpec",
    "generate_synthetic_corpus",
    "load_corpus",
    "save_corpus",
    "split_by_types",
    "InContextTask",
    "SamplerConfig",
    "anonymize_types",
    "sample_task",
    "NIL_RENDERING",
    "IN_CONTEXT",
    "TRADITIONAL",
    "Vocabulary",
    "linearize",
    "tokenize_example",
    "parse_extractions",
    "locate_mentions",
    "ModelConfig",
    "ModelParams",
    "encode",
    "generate",
    "sequence_nll",
    "TrainConfig",
    "meta_function_loss",
    "pretrain",
    "surrogate_step",
    "finetune",
    "build_kshot_episode",
    "evaluate_in_context",
    "measure_meta_gap",
    "micro_f1",
]
