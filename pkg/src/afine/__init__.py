"""A-FINE: adaptive fidelity-naturalness full-reference image quality metric."""

from .backbone import BackboneConfig, FeaturePyramid, build_backbone, extract_pyramid, interpolate_positional_grid, stage_statistics
from .checkpoint import load_model, save_model
from .errors import AfineError, ConfigError, DataError, DimensionError, NumericError, ParameterError, UsageError
from .fidelity import FidelityWeights, fidelity_score, luminance_similarity, structure_similarity
from .model import AFINE, adaptive_lambda, afine_score, calibrate, psnr, ssim_global
from .naturalness import NaturalnessHead, naturalness_score, pool_stage
from .ranking import fidelity_loss, preference_probability, ranking_label

__version__ = "0.1.0"
