"""Sequence-to-sequence coding of death-certificate text into ICD-10 codes.

The package covers the full pipeline: synthetic corpus generation, text
standardization and byte-pair tokenization, a conditional Transformer
trained with Adam on a tape-based autodiff core, beam-search decoding
with per-record confidence scores, consensus ensembling, and a metrics
suite (micro precision/recall/F with bootstrap intervals, per-chapter
error rates, score-threshold calibration).
"""

from __future__ import annotations

__version__ = "0.1.0"

from .decoding import Prediction, beam_search, greedy_decode, prediction_score
from .ensemble import Ensemble, consensus, greedy_select
from .errors import (
    ConfigError,
    CorpusFormatError,
    DivergenceError,
    MedseqError,
    ShapeError,
    ValidationError,
)
from .metrics import MetricReport, bootstrap_ci, count_matches, f_measure, micro_metrics
from .records import Certificate, Icd10Code, SideVariables, chapter_of, read_corpus, write_corpus
from .synth import GeneratorConfig, generate_corpus, split_corpus
from .tensor import Tape, Tensor, finite_diff_check
from .textprep import TokenizerModel, TrainingPair, bpe_train, concat_backward, standardize
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train
from .transformer import ModelConfig, TransformerModel, init_model, param_count

__all__ = [
    "__version__",
    "Certificate",
    "Checkpoint",
    "ConfigError",
    "CorpusFormatError",
    "DivergenceError",
    "Ensemble",
    "GeneratorConfig",
    "Icd10Code",
    "MedseqError",
    "MetricReport",
    "ModelConfig",
    "Prediction",
    "ShapeError",
    "SideVariables",
    "Tape",
    "Tensor",
    "TokenizerModel",
    "TrainConfig",
    "TrainingPair",
    "TransformerModel",
    "ValidationError",
    "beam_search",
    "bootstrap_ci",
    "bpe_train",
    "chapter_of",
    "concat_backward",
    "consensus",
    "count_matches",
    "f_measure",
    "finite_diff_check",
    "generate_corpus",
    "greedy_decode",
    "greedy_select",
    "init_model",
    "load_checkpoint",
    "micro_metrics",
    "param_count",
    "prediction_score",
    "read_corpus",
    "save_checkpoint",
    "split_corpus",
    "standardize",
    "train",
    "write_corpus",
]
