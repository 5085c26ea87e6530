"""Three-stage cascaded CNN face detection and landmark alignment in pure numpy."""

from .cascade import CascadeConfig, Detection, build_pyramid, detect, detections_to_json
from .dataset import AnnotatedImage, generate_toy_corpus, load_corpus, save_corpus
from .evaluation import eval_detection, eval_nme, evaluate_corpus, timing_table
from .geometry import Box, iou, nms
from .networks import build_network, load_weights, save_weights
from .pipeline import default_stage_settings, train_cascade
from .training import LossWeights, SampleSet, train_stage

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "Box", "CascadeConfig", "Detection", "LossWeights", "SampleSet",
    "build_network", "build_pyramid", "default_stage_settings", "detect", "detections_to_json",
    "eval_detection", "eval_nme", "evaluate_corpus", "generate_toy_corpus", "iou", "load_corpus",
    "load_weights", "nms", "save_corpus", "save_weights", "timing_table", "train_cascade",
    "train_stage",
]
