"""Multiclass prediction from binary classifiers: the sequential one-vs-normal
cascade and the 10-classifier one-vs-one score aggregation.

Cascade: the stage classifiers are consulted from most to least severe
(proliferative, severe, moderate, mild); the first one whose argmax lands on
the stage side wins, and silence means healthy. An exact 0.5/0.5 tie argmaxes
to index 0, i.e. the cascade continues.

One-vs-one: ten pairwise classifiers; a class's score accumulates the
probability mass its four classifiers assign to that class's side of their
pair; argmax wins, ties resolve to the lowest (least severe) stage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidConfig, ShapeMismatch

NUM_CLASSES = 5
# canonical pair labels of the ten one-vs-one classifiers, in classifier order
OVO_PAIRS = ((0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4))
# stage checked by each cascade slot, most severe first
CASCADE_STAGE_ORDER = (4, 3, 2, 1)


def num_ovo_classifiers(num_labels: int) -> int:
    """L * (L - 1) / 2 pairwise classifiers for L labels."""
    if num_labels < 2:
        raise InvalidConfig(f"need at least 2 labels, got {num_labels}")
    return num_labels * (num_labels - 1) // 2


def ovo_class_sets(pairs=OVO_PAIRS, num_classes=NUM_CLASSES) -> dict:
    """class -> indices of the classifiers whose pair contains that class."""
    return {
        c: tuple(i for i, pair in enumerate(pairs) if c in pair) for c in range(num_classes)
    }


def _check_prob_pairs(probs, expected_count):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (expected_count, 2):
        raise ShapeMismatch(f"expected {expected_count} probability pairs, got {probs.shape}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-4):
        raise ShapeMismatch("each probability pair must sum to ~1")
    return probs


def cascade_predict(stage_probs) -> int:
    """Walk stages 4,3,2,1; the first classifier whose argmax is the stage
    side (index 1) decides; otherwise healthy (0)."""
    probs = _check_prob_pairs(stage_probs, len(CASCADE_STAGE_ORDER))
    for slot, stage in enumerate(CASCADE_STAGE_ORDER):
        if int(np.argmax(probs[slot])) == 1:  # ties argmax to 0: cascade continues
            return stage
    return 0


@dataclass
class OvoEnsemble:
    """Pair labels plus the per-class classifier sets."""

    pairs: tuple = OVO_PAIRS

    def __post_init__(self):
        self.pairs = tuple(tuple(p) for p in self.pairs)
        if self.pairs != OVO_PAIRS:
            raise InvalidConfig(f"pair labels must be the canonical list {OVO_PAIRS}")
        self.class_sets = ovo_class_sets(self.pairs)


def ovo_class_scores(probs, ensemble: OvoEnsemble | None = None) -> np.ndarray:
    """score[c] = sum of the probability each of c's classifiers puts on c."""
    ensemble = ensemble or OvoEnsemble()
    probs = _check_prob_pairs(probs, len(ensemble.pairs))
    scores = np.zeros(NUM_CLASSES)
    for c in range(NUM_CLASSES):
        for i in ensemble.class_sets[c]:
            side = 0 if ensemble.pairs[i][0] == c else 1
            scores[c] += probs[i][side]
    return scores


def ovo_predict(probs, ensemble: OvoEnsemble | None = None) -> int:
    """Argmax of the class scores; ties resolve to the lowest stage."""
    return int(np.argmax(ovo_class_scores(probs, ensemble)))


# ---------------------------------------------------------------------------
# manifest file
# ---------------------------------------------------------------------------

def write_manifest(path, scheme, model_paths, extractor=None) -> None:
    """Persist an ensemble description: scheme tag, ordered model paths, pair
    labels for one-vs-one, and (for the cascade) the feature extractor setup
    needed to reproduce features at prediction time."""
    if scheme not in ("cascade", "ovo"):
        raise InvalidConfig(f"scheme must be 'cascade' or 'ovo', got {scheme!r}")
    expected = len(CASCADE_STAGE_ORDER) if scheme == "cascade" else len(OVO_PAIRS)
    model_paths = [str(p) for p in model_paths]
    if len(model_paths) != expected:
        raise InvalidConfig(f"{scheme} needs {expected} models, got {len(model_paths)}")
    doc = {"scheme": scheme, "models": model_paths}
    if scheme == "ovo":
        doc["pairs"] = [list(p) for p in OVO_PAIRS]
    if extractor is not None:
        doc["extractor"] = dict(extractor)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    """Load and validate an ensemble manifest."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    scheme = doc.get("scheme")
    if scheme not in ("cascade", "ovo"):
        raise FormatError(f"manifest scheme must be 'cascade' or 'ovo', got {scheme!r}")
    models = doc.get("models")
    expected = len(CASCADE_STAGE_ORDER) if scheme == "cascade" else len(OVO_PAIRS)
    if not isinstance(models, list) or len(models) != expected:
        raise FormatError(f"manifest must list exactly {expected} models for {scheme}")
    if scheme == "ovo":
        pairs = tuple(tuple(p) for p in doc.get("pairs", ()))
        if pairs != OVO_PAIRS:
            raise FormatError(f"manifest pair labels differ from the canonical list {OVO_PAIRS}")
    return doc


# ---------------------------------------------------------------------------
# loaded predictors: manifest + model files -> image-level stage prediction
# ---------------------------------------------------------------------------

def _resolve(manifest_path, model_path) -> str:
    p = Path(model_path)
    return str(p if p.is_absolute() else Path(manifest_path).parent / p)


class CascadePredictor:
    """Four one-vs-normal heads over a shared feature extractor.

    Manifest model order is the check order: proliferative, severe, moderate,
    mild. Each head outputs (p_normal, p_stage).
    """

    scheme = "cascade"

    def __init__(self, heads, extractor):
        from .models import ModelGraph  # local import to keep module load light

        if len(heads) != len(CASCADE_STAGE_ORDER):
            raise InvalidConfig(f"cascade needs {len(CASCADE_STAGE_ORDER)} heads")
        self.heads = list(heads)
        self.extractor = extractor
        for head in self.heads:
            if not isinstance(head, ModelGraph) or head.output_shape != (2,):
                raise InvalidConfig("every cascade head must be a binary model")

    @property
    def input_hw(self):
        return self.extractor.input_hw

    def stage_probabilities(self, images) -> np.ndarray:
        """(n, 4, 2) array in check order (stage 4 first)."""
        from .models import predict

        features = self.extractor.extract(np.asarray(images, dtype=np.float32))
        return np.stack([predict(head, features) for head in self.heads], axis=1)

    def predict(self, images) -> np.ndarray:
        probs = self.stage_probabilities(images)
        return np.asarray([cascade_predict(sample) for sample in probs], dtype=np.int64)

    def class_scores(self, images) -> np.ndarray:
        """(n, 5): stage side probability per stage; healthy gets the mean
        normal-side mass of the four heads."""
        probs = self.stage_probabilities(images)
        scores = np.zeros((probs.shape[0], NUM_CLASSES))
        scores[:, 0] = probs[:, :, 0].mean(axis=1)
        for slot, stage in enumerate(CASCADE_STAGE_ORDER):
            scores[:, stage] = probs[:, slot, 1]
        return scores


class OvoPredictor:
    """Ten pairwise binary networks consuming the image directly."""

    scheme = "ovo"

    def __init__(self, pair_models):
        from .models import ModelGraph

        if len(pair_models) != len(OVO_PAIRS):
            raise InvalidConfig(f"one-vs-one needs {len(OVO_PAIRS)} models")
        self.pair_models = list(pair_models)
        shapes = {m.input_shape for m in self.pair_models}
        if len(shapes) != 1:
            raise InvalidConfig("all pair models must share one input shape")
        for m in self.pair_models:
            if not isinstance(m, ModelGraph) or m.output_shape != (2,):
                raise InvalidConfig("every pair model must be a binary model")
        self._ensemble = OvoEnsemble()

    @property
    def input_hw(self):
        h, w, _ = self.pair_models[0].input_shape
        return (h, w)

    def pair_probabilities(self, images) -> np.ndarray:
        from .models import predict

        images = np.asarray(images, dtype=np.float32)
        return np.stack([predict(m, images) for m in self.pair_models], axis=1)

    def predict(self, images) -> np.ndarray:
        probs = self.pair_probabilities(images)
        return np.asarray(
            [ovo_predict(sample, self._ensemble) for sample in probs], dtype=np.int64
        )

    def class_scores(self, images) -> np.ndarray:
        probs = self.pair_probabilities(images)
        return np.stack([ovo_class_scores(sample, self._ensemble) for sample in probs])


def load_predictor(manifest_path):
    """Build a CascadePredictor or OvoPredictor from a manifest file."""
    from .models import StubFeatureExtractor
    from .serialize import load_model

    doc = read_manifest(manifest_path)
    model_paths = [_resolve(manifest_path, p) for p in doc["models"]]
    graphs = [load_model(p) for p in model_paths]
    if doc["scheme"] == "ovo":
        return OvoPredictor(graphs)
    ext = doc.get("extractor")
    if not isinstance(ext, dict) or ext.get("kind") != "stub":
        raise FormatError("cascade manifest needs a stub extractor entry")
    try:
        extractor = StubFeatureExtractor(
            int(ext["seed"]),
            (int(ext["input_hw"][0]), int(ext["input_hw"][1])),
            int(ext["feature_dim"]),
        )
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise FormatError(f"malformed extractor entry in manifest: {exc}") from exc
    return CascadePredictor(graphs, extractor)
