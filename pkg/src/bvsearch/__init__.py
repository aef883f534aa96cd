"""Visual search over binary local descriptors."""

from .core import (
    BinaryDescriptor,
    CapacityError,
    ConfigurationError,
    Feature,
    FeatureSet,
    FormatError,
    Keypoint,
    Substring,
    UsageError,
    hamming_distance,
    hamming_distance_sub,
)
from .engine import VisualSearchEngine
from .geometry import (
    DegenerateSampleError,
    GVConfig,
    GVReport,
    Homography,
    convexity_check,
    dedup_inliers,
    estimate_homography_dlt,
    prosac_homography,
    verify,
)
from .index import EngineState, IndexEntry, InvertedIndex, add_image, load, read_descriptor_file, save, write_descriptor_file
from .scoring import FeatureMatch, Scheme, ScoringConfig, VoteTable, knn_in_posting, score_matches, search
from .substring import SubstringDictionary, bit_statistics, build_dictionary, extract
from .vocabulary import BinaryKMeans, TrainingConfig, Vocabulary, quantize, train

__version__ = "0.1.0"
