"""Feature extraction: backends, feature bags and the binary cache."""

from .cache import read_cache, write_cache
from .core import (FEATURE_DIM, DeterministicStatsBackend, FeatureBackend,
                   FeatureBag, OnnxCnnBackend, area_resize, extract_features,
                   load_cnn_backend, stats_backend)

__all__ = [
    "FEATURE_DIM", "DeterministicStatsBackend", "FeatureBackend", "FeatureBag",
    "OnnxCnnBackend", "area_resize", "extract_features", "load_cnn_backend",
    "stats_backend", "read_cache", "write_cache",
]
