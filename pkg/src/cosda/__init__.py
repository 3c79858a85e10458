"""Continual source-free domain adaptation with a dual-speed teacher-student pair."""
from .adapter import AdaptConfig, AdaptLog, adapt_domain, pseudo_labels, sequential_adapt
from .domains import (Domain, DomainSequenceSpec, LabeledDataset, gen_gaussian_blobs, gen_two_moons,
                      load_dataset, make_sequence, save_dataset)
from .errors import CosdaError
from .evaluation import AccuracyMatrix, EvalReport, accuracy, accuracy_matrix, bwt, source_drop
from .experiment import ExperimentConfig, run_experiment
from .losses import consistency_loss, mi_loss, mutual_information, total_loss
from .mixup import MixupConfig, mix_batch, theorem1_oracle, theta_bar_empirical, theta_bar_printed
from .model import (Classifier, MlpConfig, PretrainConfig, forward, init_classifier, load_checkpoint,
                    predict_proba, pretrain, save_checkpoint)
from .verify import OracleReport, run_all_oracles

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "AdaptConfig", "AdaptLog", "Classifier", "CosdaError", "Domain",
    "DomainSequenceSpec", "EvalReport", "ExperimentConfig", "LabeledDataset", "MixupConfig",
    "MlpConfig", "OracleReport", "PretrainConfig", "accuracy", "accuracy_matrix", "adapt_domain",
    "bwt", "consistency_loss", "forward", "gen_gaussian_blobs", "gen_two_moons", "init_classifier",
    "load_checkpoint", "load_dataset", "make_sequence", "mi_loss", "mix_batch", "mutual_information",
    "predict_proba", "pretrain", "pseudo_labels", "run_all_oracles", "run_experiment",
    "save_checkpoint", "save_dataset", "sequential_adapt", "source_drop", "theorem1_oracle",
    "theta_bar_empirical", "theta_bar_printed", "total_loss",
]
