"""Attention-based sparse keypoint matching with adaptive inference.

The package is organized as a small numpy library:

- ``numcore``: tensors, reverse-mode gradients, FLOP accounting
- ``features``: keypoint/descriptor containers and feature-file I/O
- ``rope``: rotary relative positional encoding
- ``backbone``: the L-layer attention network and its weights format
- ``head``: pairwise scores, soft partial assignment, match extraction
- ``adaptive``: early-exit / point-pruning inference driver
- ``supervision``: labeling, losses, and the two-stage training loop
- ``synthgen``: synthetic homography pairs with descriptor noise
- ``geometry``: DLT, RANSAC, and the evaluation metrics
- ``cli``: the ``glow`` command (gen / train / match / eval / bench)
"""

from .adaptive import AdaptiveConfig, adaptive_forward, exit_threshold
from .backbone import ModelParams, init_model, load_model, save_model
from .features import FeatureSet, normalize_points, read_features, write_features
from .geometry import EvalReport, dlt, error_auc, match_pr, ransac_h
from .head import MatchResult, extract_matches, read_matches, write_matches
from .supervision import GroundTruth, TrainConfig, label_pairs, train
from .synthgen import PRESETS, generate_pair, sample_homography

__version__ = "0.1.0"

__all__ = [
    "AdaptiveConfig", "adaptive_forward", "exit_threshold",
    "ModelParams", "init_model", "load_model", "save_model",
    "FeatureSet", "normalize_points", "read_features", "write_features",
    "EvalReport", "dlt", "error_auc", "match_pr", "ransac_h",
    "MatchResult", "extract_matches", "read_matches", "write_matches",
    "GroundTruth", "TrainConfig", "label_pairs", "train",
    "PRESETS", "generate_pair", "sample_homography",
    "__version__",
]
