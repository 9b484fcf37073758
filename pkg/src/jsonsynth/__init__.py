"""Synthetic JSON records from an autoregressive dual-head transformer.

Records are serialized into key, value and structural tokens, positioned by
their key paths, and generated under grammar and schema constraints.
"""

from .errors import (
    CheckpointError,
    CorpusError,
    GenerationDeadlock,
    JsonSynthError,
    SchemaError,
    StructureError,
    TransitionError,
    VocabularyMiss,
)
from .grammar import JsonGrammar, MaskKind, PDAState
from .model import DualHeadTransformer, ModelConfig, MoGOutput
from .sampler import CountTracker, GenerationSettings, generate, next_mask, sample_numeric, sample_token
from .schema import DerivedSchema, SchemaMaskTable, compile_mask_table, derive_schema, postprocess_value, validate
from .tokenizer import NumericScalers, TokenStream, VocabSpec, build_vocab, decode, encode, fit_scalers
from .training import Artifacts, Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
