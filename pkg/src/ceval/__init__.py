"""c-Eval: score feature-based explanations by the smallest label-flipping
perturbation of the features they leave out."""

__version__ = "0.1.0"

from .attacks import (AttackConfig, AttackFailed, CWConfig, EpsSchedule, Mask,  # noqa: E402
                      PerturbationResult, run_attack, verify_result)
from .datasets import Dataset, load_idx, load_mnist, make_gaussian_blobs  # noqa: E402
from .explainers import (Explanation, ImportanceMap, SegmentMap, grid_segment,  # noqa: E402
                         parse_explainer, top_k)
from .metric import (CEvalResult, MetricUnavailable, ceval_plot, compute_ceval,  # noqa: E402
                     compute_normalized, near_affine_check, pearson, rank_explainers)
from .models import (AffineClassifier, ConvNetClassifier, MLPClassifier, TrainConfig,  # noqa: E402
                     load_model, save_model, train, train_adversarial)
from .oracle import AffineInstance, oracle_ceval  # noqa: E402

__all__ = [
    "AttackConfig", "AttackFailed", "CWConfig", "EpsSchedule", "Mask", "PerturbationResult",
    "run_attack", "verify_result", "Dataset", "load_idx", "load_mnist", "make_gaussian_blobs",
    "Explanation", "ImportanceMap", "SegmentMap", "grid_segment", "parse_explainer", "top_k",
    "CEvalResult", "MetricUnavailable", "ceval_plot", "compute_ceval", "compute_normalized",
    "near_affine_check", "pearson", "rank_explainers", "AffineClassifier", "ConvNetClassifier",
    "MLPClassifier", "TrainConfig", "load_model", "save_model", "train", "train_adversarial",
    "AffineInstance", "oracle_ceval",
]
