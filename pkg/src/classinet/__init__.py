"""classinet: feature expansion for sparse short texts.

Builds a directed weighted graph of binary feature predictors from
unlabeled text and uses it to append predicted missing features to
sparse instances before downstream classification.
"""

from .corpus import (Document, SparseVector, Vocabulary, build_vocabulary,
                     tokenize, vectorize)
from .expand import (ExpandedInstance, ExpansionCandidate,
                     GlobalExpansionConfig, MutualKnnGraph,
                     build_mutual_knn, expand_all_neighbours, expand_global,
                     expand_independent, expand_instances, expand_local_path,
                     expand_mutual_neighbours)
from .graph import (ClassiNet, ConfusionCounts, LabelVector, build_classinet,
                    calibrate_k, confusion, edge_weight, estimate_angle,
                    knn_search, label_vector, load_classinet, sample_eval_set,
                    save_classinet)
from .predictor import (FeaturePredictor, IndicatorPredictor, PredictorBank,
                        PredictorSample, load_bank, save_bank,
                        select_training_instances, train_bank,
                        train_predictor)

__version__ = "0.1.0"

__all__ = [
    "ClassiNet",
    "ConfusionCounts",
    "Document",
    "ExpandedInstance",
    "ExpansionCandidate",
    "FeaturePredictor",
    "GlobalExpansionConfig",
    "IndicatorPredictor",
    "LabelVector",
    "MutualKnnGraph",
    "PredictorBank",
    "PredictorSample",
    "SparseVector",
    "Vocabulary",
    "build_classinet",
    "build_mutual_knn",
    "build_vocabulary",
    "calibrate_k",
    "confusion",
    "edge_weight",
    "estimate_angle",
    "expand_all_neighbours",
    "expand_global",
    "expand_independent",
    "expand_instances",
    "expand_local_path",
    "expand_mutual_neighbours",
    "knn_search",
    "label_vector",
    "load_bank",
    "load_classinet",
    "sample_eval_set",
    "save_bank",
    "save_classinet",
    "select_training_instances",
    "tokenize",
    "train_bank",
    "train_predictor",
    "vectorize",
]
