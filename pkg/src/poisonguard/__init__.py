"""Poisoning attacks on a linear SVM and auto-encoder based poison filtering."""
from .attacks import AttackConfig, PoisonSet, generate_poisons, poison_round
from .data import BinaryTask, RoundBuffer, SampleSet, build_rounds, load_idx, make_binary_task
from .detectors import DetectorConfig, Gmm, TopK, filter_round, score_samples, separate, train_detector
from .harness import ExperimentConfig, Report, desk_config, emit_report
from .svm import SvmConfig, train_svm

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "BinaryTask", "DetectorConfig", "ExperimentConfig", "Gmm", "PoisonSet",
    "Report", "RoundBuffer", "SampleSet", "SvmConfig", "TopK", "build_rounds", "desk_config",
    "emit_report", "filter_round", "generate_poisons", "load_idx", "make_binary_task",
    "poison_round", "score_samples", "separate", "train_detector", "train_svm",
]
