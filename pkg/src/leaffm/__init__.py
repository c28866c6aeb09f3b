"""FM, FFM and Leaf-FM click-through-rate models with hand-written gradients
and a folded serving path that scores any trained Leaf-FM at plain-FM cost."""
from .data import (
    DatasetSplit, Entry, FieldKind, FieldSchema, HashSpec, Instance, InstanceTable, as_table, hash_feature,
    make_batches, parse_criteo_tsv, parse_csv_with_schema, split_dataset,
)
from .errors import LeafFMError
from .export import FoldedModel, fold, read_model, score_folded, score_folded_batch, write_model
from .metrics import EvalResult, auc, evaluate, logloss
from .numerics import ActivationKind, LayerNormParams, layer_norm_backward, layer_norm_forward
from .params import AdamState, ModelConfig, ParameterSet, Variant, adam_update, audit, build_parameters, l2_penalty
from .scoring import fm_interaction_bruteforce, fm_interaction_fast, score, score_ffm, score_fm, score_leaf
from .synth import SynthConfig, synth_generate
from .training import TrainRun, backward_batch, gradient_check, train

__version__ = "0.1.0"
