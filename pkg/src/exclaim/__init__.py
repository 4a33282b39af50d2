"""Entity-aware cross-lingual claim detection over frozen token embeddings."""

__version__ = "0.1.0"

from .corpus import ClaimInstance, Dataset, PairingTable, load_dataset, save_dataset
from .embeddings import EmbeddingStore, hash_embed, open_store, write_store
from .entity_typing import EntityScheme, SchemeVariant, assign_indices, scheme_cardinality
from .errors import ConfigError, DataError, ExclaimError, NumericalError
from .model import ModelConfig, ModelParams, backward, cross_entropy, forward, init_params, predict
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "ClaimInstance", "Dataset", "PairingTable", "load_dataset", "save_dataset",
    "EmbeddingStore", "hash_embed", "open_store", "write_store",
    "EntityScheme", "SchemeVariant", "assign_indices", "scheme_cardinality",
    "ConfigError", "DataError", "ExclaimError", "NumericalError",
    "ModelConfig", "ModelParams", "backward", "cross_entropy", "forward",
    "init_params", "predict",
    "Checkpoint", "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
