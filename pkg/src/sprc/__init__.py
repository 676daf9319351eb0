"""Composed image retrieval with sentence-level prompts.

A reference image plus a relative caption form the query; a prompt generator
cross-attends the caption onto the image patches to produce a short sequence
of continuous text tokens, which is prepended to the caption and encoded by a
text encoder.  Training combines a contrastive retrieval loss with an
alignment loss against an auxiliary prompt optimized through an EMA copy of
the text encoder.
"""

import importlib.metadata

from .config import AuxiliaryConfig, InitMode, Mechanism, PromptMode, TrainConfig, load_config
from .dataset import (
    Corpus,
    SyntheticSpec,
    Triplet,
    Vocabulary,
    generate_synthetic,
    split_triplets,
    load_corpus_features,
    load_triplets,
    read_embedding_cache,
    save_corpus_features,
    write_embedding_cache,
    write_triplets,
)
from .errors import (
    CacheFormatError,
    CheckpointError,
    ConfigError,
    LengthError,
    ManifestError,
    NumericError,
    ReferentialError,
    SprcError,
    StructuralError,
    VocabularyError,
)
from .evaluation import (
    CrossAttentionScorer,
    IdentityScorer,
    RankedResult,
    RecallTable,
    compute_recall,
    embed_corpus,
    evaluate_model,
    fashioniq_average,
    rank_query,
    rerank_two_stage,
    sweep,
)
from .model import RetrievalModel, build_model
from .objective import (
    BatchEmbeddings,
    alignment_loss,
    contrastive_loss,
    inner_objective,
    solve_auxiliary_prompt,
    solve_auxiliary_prompt_batch,
    total_loss,
)
from .training import (
    TrainerState,
    cosine_lr,
    init_state,
    load_checkpoint,
    restore_state,
    save_checkpoint,
    train,
    train_step,
)

try:
    __version__ = importlib.metadata.version("sprc")
except importlib.metadata.PackageNotFoundError:  # running from a raw checkout
    __version__ = "0.0.0"

__all__ = [
    "AuxiliaryConfig",
    "BatchEmbeddings",
    "CacheFormatError",
    "CheckpointError",
    "ConfigError",
    "Corpus",
    "CrossAttentionScorer",
    "IdentityScorer",
    "InitMode",
    "LengthError",
    "ManifestError",
    "Mechanism",
    "NumericError",
    "PromptMode",
    "RankedResult",
    "RecallTable",
    "ReferentialError",
    "RetrievalModel",
    "SprcError",
    "StructuralError",
    "SyntheticSpec",
    "TrainConfig",
    "TrainerState",
    "Triplet",
    "Vocabulary",
    "VocabularyError",
    "alignment_loss",
    "build_model",
    "compute_recall",
    "contrastive_loss",
    "cosine_lr",
    "embed_corpus",
    "evaluate_model",
    "fashioniq_average",
    "generate_synthetic",
    "split_triplets",
    "init_state",
    "load_checkpoint",
    "load_config",
    "load_corpus_features",
    "load_triplets",
    "rank_query",
    "read_embedding_cache",
    "rerank_two_stage",
    "restore_state",
    "save_checkpoint",
    "save_corpus_features",
    "inner_objective",
    "solve_auxiliary_prompt",
    "solve_auxiliary_prompt_batch",
    "sweep",
    "total_loss",
    "train",
    "train_step",
    "write_embedding_cache",
    "write_triplets",
]
