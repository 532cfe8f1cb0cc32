"""Ki-67 proliferation-index pipeline.

Downstream of neural nucleus segmentation: binarize and clean probability
maps, detect and split overlapped-nuclei regions, classify nuclei as
immunopositive or immunonegative, score the proliferation index, and
evaluate everything against instance-level metrics.
"""

__version__ = "0.1.0"

from .raster import (  # noqa: F401
    BinaryMask,
    LabelMap,
    ProbabilityMap,
    RasterImage,
    load_image,
    load_label_map,
    save_image,
    save_label_map,
    to_probability,
)
from .postproc import PostprocParams, adaptive_threshold, binary_open, clean_mask, fill_holes, remove_small  # noqa: F401
from .regions import FeatureVector, Region, connected_components, extract_region, region_features  # noqa: F401
from .gbdt import GbdtModel, GbdtParams, gbdt_load, gbdt_predict, gbdt_save, gbdt_train  # noqa: F401
from .rf import RfModel, RfParams, rf_load, rf_predict_proba, rf_save, rf_train  # noqa: F401
from .classify import (  # noqa: F401
    NucleusPatch,
    RfNucleusClassifier,
    StainBaseline,
    StainVectors,
    classify_nuclei,
    patch_features,
    stain_deconvolve,
)
from .separate import (  # noqa: F401
    SeedSet,
    SeparationParams,
    erosion_seeds,
    marker_watershed,
    separate_all,
    split_region_dtw,
    split_region_gmm,
)
from .metrics import (  # noqa: F401
    ClassificationMetrics,
    InstanceMetrics,
    MatchResult,
    aji,
    classification_metrics,
    dice2,
    match_instances,
    panoptic_quality,
    pixel_metrics,
)
from .scoring import AgreementStats, PiReport, RegionCount, agreement, pi_score, score_case  # noqa: F401
from .synth import SynthConfig, SynthTruth, export_dataset, generate  # noqa: F401
from .qupath import AnnotationSet, import_qupath_geojson  # noqa: F401
