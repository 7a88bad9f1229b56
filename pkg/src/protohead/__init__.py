"""Interpretable prototype classification heads over precomputed text embeddings.

The package trains a multi-head graph-attention prototype layer (or a plain
cosine-similarity baseline) on top of fixed embedding vectors.  The class
decision is a linear readout of the input-to-prototype attention edge weights,
so after projecting each prototype onto its nearest training exemplar every
prediction can be explained by a short list of (prototype, weight, exemplar)
triples.
"""

__version__ = "0.1.0"

from protohead.config import TrainConfig
from protohead.embedding_io import (
    EmbeddingDataset,
    EmbeddingRecord,
    SplitSpec,
    SyntheticConfig,
    gen_synthetic,
    read_pemb,
    split,
    write_pemb,
)
from protohead.losses import LossWeights
from protohead.proto_head import (
    CosineHeadModel,
    EdgeWeights,
    GAHeadModel,
    PrototypeSet,
    load_checkpoint,
    save_checkpoint,
)
from protohead.trainer import TrainReport, evaluate, gradcheck, project_prototypes, train

__all__ = [
    "CosineHeadModel",
    "EdgeWeights",
    "EmbeddingDataset",
    "EmbeddingRecord",
    "GAHeadModel",
    "LossWeights",
    "PrototypeSet",
    "SplitSpec",
    "SyntheticConfig",
    "TrainConfig",
    "TrainReport",
    "evaluate",
    "gen_synthetic",
    "gradcheck",
    "load_checkpoint",
    "project_prototypes",
    "read_pemb",
    "save_checkpoint",
    "split",
    "train",
    "write_pemb",
]
