"""Entropy-maximization training and cross-perturbation evaluation for
extractive question answering, with a small numpy span predictor."""

from .corpus import GoldAnswer, QAExample, TokenizedExample, load_dataset, tokenize_example
from .metrics import CrossMatrix, SpanDistribution, dataset_entropy, span_entropy, squad_em, squad_f1
from .model import ModelParams, ModelSpec, forward, init_params, predict_span
from .perturb import PERTURBATIONS, PerturbationKind, apply, apply_seeded
from .trainer import TrainConfig, run_cross_eval, train, tune_lambda

__version__ = "0.1.0"

__all__ = [
    "GoldAnswer", "QAExample", "TokenizedExample", "load_dataset", "tokenize_example",
    "CrossMatrix", "SpanDistribution", "dataset_entropy", "span_entropy", "squad_em", "squad_f1",
    "ModelParams", "ModelSpec", "forward", "init_params", "predict_span",
    "PERTURBATIONS", "PerturbationKind", "apply", "apply_seeded",
    "TrainConfig", "run_cross_eval", "train", "tune_lambda",
]
