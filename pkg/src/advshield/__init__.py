"""Unsupervised adversarial-input detection with redundant defenders.

A small victim classifier is wrapped by two kinds of unsupervised
defenders: latent defenders (victim replicas fine-tuned so benign
features condense around per-class unit-sphere centers, flagged by
PCA-space distance percentiles) and an input defender (per-class patch
dictionaries; a low sparse-reconstruction PSNR flags atypical inputs).
Binary defender verdicts fuse through a noisy-OR model.  A companion
planner picks how many defenders and processing units fit a hardware
budget.
"""

from .arch import DEFAULT_ARCH, build_network, parse_arch, render_arch
from .attacks import AttackConfig, bim, fgs, generate, parse_attack
from .data import (Dataset, load_idx, load_idx_images, load_idx_labels,
                   make_digits, split, write_idx)
from .errors import (AdvShieldError, ArchParseError, CalibrationError,
                     DivergenceError, IdxError, InfeasiblePlanError,
                     InsufficientProfileError, ShapeError, ValidationError)
from .estimators import AdversarialDetector, VictimClassifier
from .evaluate import EvalReport, auc, detection_rate, evaluate, sp_grid
from .fusion import FusionModel, calibrate, decide, estimate_pn, noisy_or
from .latent import (LatentDefender, build_chain, load_defender,
                     save_defender, train_defender)
from .pca import PcaProjection, fit_pca, fold_into_dense
from .pipeline import (DetectionPipeline, DetectionResult, load_pipeline,
                       save_pipeline)
from .planner import (DefensePlan, ResourceBudget, check_plan, plan,
                      profile_costs)
from .sparse import (Dictionary, InputDefender, PatchConfig,
                     extract_patches, lars_lasso, learn_class_dictionaries,
                     learn_dictionary, load_dictionary, omp,
                     profile_input_defender, reconstruct_and_psnr,
                     save_dictionary)

__version__ = "0.1.0"

__all__ = [
    "AdvShieldError", "AdversarialDetector", "ArchParseError",
    "AttackConfig", "CalibrationError", "DEFAULT_ARCH", "Dataset",
    "DefensePlan", "DetectionPipeline", "DetectionResult", "Dictionary",
    "DivergenceError", "EvalReport", "FusionModel", "IdxError",
    "InfeasiblePlanError", "InputDefender", "InsufficientProfileError",
    "LatentDefender", "PatchConfig", "PcaProjection", "ResourceBudget",
    "ShapeError", "ValidationError", "VictimClassifier", "auc", "bim",
    "build_chain", "build_network", "calibrate", "check_plan", "decide",
    "detection_rate", "estimate_pn", "evaluate", "extract_patches", "fgs",
    "fit_pca", "fold_into_dense", "generate", "lars_lasso",
    "learn_class_dictionaries", "learn_dictionary", "load_defender",
    "load_dictionary", "load_idx", "load_idx_images", "load_idx_labels",
    "load_pipeline", "make_digits", "noisy_or", "omp", "parse_arch",
    "parse_attack", "plan", "profile_costs", "profile_input_defender",
    "reconstruct_and_psnr", "render_arch", "save_defender",
    "save_dictionary", "save_pipeline", "split", "sp_grid",
    "train_defender", "write_idx",
]
