"""Region-aware masked pretraining engine for 4D volumetric time series.

The package is organized as a pipeline: synthesize or load NIfTI volumes,
preprocess them onto a common grid, classify the patch lattice against an
atlas, mask region-targeted patches, pretrain a hybrid attention/state-space
autoencoder on the masked reconstruction task, finetune it as a classifier,
and attribute its decisions back to atlas regions. Every stage is also
reachable from the ``regionmae`` command line.
"""

from regionmae.atlas import (
    MACROREGIONS,
    PatchGrid,
    PatchSets,
    RegionMap,
    classify_patches,
    patch_set_report,
)
from regionmae.attribution import (
    AttributionConfig,
    AttributionMap,
    aggregate_group,
    ig_sq,
    integrated_gradients,
    threshold_and_project,
)
from regionmae.checkpoint import load_checkpoint, restore_params, save_checkpoint
from regionmae.config import DEFAULTS, load_config
from regionmae.errors import (
    AttributionError,
    CheckpointError,
    ConfigurationError,
    DegenerateDataError,
    FormatError,
    GeometryError,
    MetricError,
    TrainingError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    ValidationError,
)
from regionmae.masking import MaskSpec, MaskTensor, build_mask, load_mask, save_mask
from regionmae.model import CONFIGURATIONS, HybridModel, ModelConfig
from regionmae.nifti import LabelVolume, Volume4D, read_nifti, write_nifti
from regionmae.preprocess import preprocess_volume, qc_gate, zscore_clip
from regionmae.stats import (
    accuracy,
    auroc,
    bonferroni,
    correct_and_tier,
    friedman_test,
    wilcoxon_signed_rank,
)
from regionmae.synth import SynthConfig, synth_cohort, write_cohort
from regionmae.training import (
    RunConfig,
    finetune,
    masked_mse,
    pretrain,
    split_subjects,
)

__version__ = "0.1.0"

__all__ = [
    "MACROREGIONS",
    "PatchGrid",
    "PatchSets",
    "RegionMap",
    "classify_patches",
    "patch_set_report",
    "AttributionConfig",
    "AttributionMap",
    "aggregate_group",
    "ig_sq",
    "integrated_gradients",
    "threshold_and_project",
    "load_checkpoint",
    "restore_params",
    "save_checkpoint",
    "DEFAULTS",
    "load_config",
    "AttributionError",
    "CheckpointError",
    "ConfigurationError",
    "DegenerateDataError",
    "FormatError",
    "GeometryError",
    "MetricError",
    "TrainingError",
    "TruncatedFileError",
    "UnsupportedDatatypeError",
    "ValidationError",
    "MaskSpec",
    "MaskTensor",
    "build_mask",
    "load_mask",
    "save_mask",
    "CONFIGURATIONS",
    "HybridModel",
    "ModelConfig",
    "LabelVolume",
    "Volume4D",
    "read_nifti",
    "write_nifti",
    "preprocess_volume",
    "qc_gate",
    "zscore_clip",
    "accuracy",
    "auroc",
    "bonferroni",
    "correct_and_tier",
    "friedman_test",
    "wilcoxon_signed_rank",
    "SynthConfig",
    "synth_cohort",
    "write_cohort",
    "RunConfig",
    "finetune",
    "masked_mse",
    "pretrain",
    "split_subjects",
    "__version__",
]
