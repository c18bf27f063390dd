"""Perturbation-based attribution maps for image classifiers.

Seven attribution flavors (sliding patch, LIME, and mask optimization, each
with a generative-inpainter variant) behind pluggable classifier-oracle and
filler interfaces, plus the evaluation harness to compare them: object
localization, deletion, saliency, filler effectiveness, and hyperparameter
sensitivity sweeps.
"""

from .errors import (
    CapabilityError,
    ExternalToolError,
    FormatError,
    MethodError,
    ParameterError,
    ShapeError,
)
from .fillers import (
    BlurFill,
    CachingFill,
    ExternalInpaintFill,
    FillStrategy,
    GrayFill,
    HarmonicInpaintFill,
    NoiseFill,
    counter_noise,
    make_filler,
)
from .fixtures import ShapeSample, generate_shapes, make_shapes_dataset
from .imgcore import (
    AttributionMap,
    BoundingBox,
    bilinear_resize,
    bilinear_resize_adjoint,
    composite,
    gaussian_blur,
    jitter,
    jitter_adjoint,
    read_heatmap,
    read_image,
    resize_image,
    write_heatmap,
    write_image,
)
from .lime import LimeConfig, LimeResult, LimeSample, fit_weighted_lasso, lime_attribute, lime_sample_batch
from .metrics import (
    DeletionCurve,
    compare_fillers,
    deletion_metric,
    derive_box,
    full_blur_confidence,
    iou,
    label_histogram,
    localization_error,
    outside_box_drop,
    saliency_metric,
    select_alpha,
)
from .mp import (
    FidoConfig,
    Mp2Config,
    MpConfig,
    fido_ca_attribute,
    mp2_attribute,
    mp2g_attribute,
    mp_attribute,
    tv_grad,
    tv_norm,
)
from .oracle import (
    ClassifierOracle,
    FiniteDiffGradients,
    RegionMeanOracle,
    ScoreServerOracle,
    UniformOracle,
    finite_diff_gradient,
)
from .sensitivity import SweepSpec, hog_pearson, ms_ssim, run_sweep, spearman, ssim
from .sp import SpConfig, sp_attribute, sp_coarse_side, sp_sample_trace
from .superpixel import Segmentation, slic, superpixel_mask
from .tinycnn import TinyCnn, load_model, save_model, train_tiny_cnn

__version__ = "0.1.0"
