"""Diabetic retinopathy staging: preprocessing, small CNNs trained from
scratch, and binary-classifier ensembles, with a CLI front end."""

from .dataset import STAGE_NAMES, Batch, DatasetIndex, scan_directory, select_pair
from .ensemble import (
    CASCADE_STAGE_ORDER,
    OVO_PAIRS,
    CascadePredictor,
    OvoEnsemble,
    OvoPredictor,
    cascade_predict,
    load_predictor,
    num_ovo_classifiers,
    ovo_class_scores,
    ovo_predict,
)
from .estimators import CascadeStageClassifier, FundusPreprocessor, OvoStageClassifier
from .metrics import ConfusionMatrix, accuracy, binary_rates, confusion_matrix, kappa, logloss
from .models import (
    InceptionModuleSpec,
    ModelGraph,
    StubFeatureExtractor,
    build_binary_head,
    build_inception_module,
    build_small_inception,
    forward,
    init_weights,
    stub_feature_extractor,
)
from .preprocess import PreprocessConfig, RasterImage, preprocess_fundus, read_image, write_png
from .serialize import load_model, save_model
from .synthetic import generate_dataset_tree, make_class_images, synthetic_fundus
from .training import TrainConfig, TrainHistory, fit, lr_schedule, sgd_nesterov_step

__version__ = "0.1.0"
