"""Entity-level text-driven image editing via guided latent diffusion.

A positioning prompt locates the edit region through text-conditioned
segmentation; a target prompt steers masked, gradient-guided reverse
diffusion in latent space; everything outside the region is preserved by
per-step blending against the forward-noised input.
"""

from .calibration import CalibrationConfig, segment, threshold_mask
from .codec import Codec, IdentityCodec, mask_to_latent
from .errors import (
    BundleGeometryError,
    DegenerateEmbeddingError,
    GuidanceDivergenceError,
    ModelLoadError,
    ScheduleRangeError,
    ShapeMismatchError,
)
from .guidance import (
    EmbeddingVector,
    GuidanceEncoders,
    GuidanceParams,
    clip_guidance,
    combine_cfg,
    nerp_loss,
    shift_mean,
    total_objective,
)
from .metrics import (
    MetricReport,
    clip_score,
    evaluate_edits,
    ih_score,
    preservation_lpips,
    psnr,
    sfid,
)
from .sampler import EditParams, EditResult, run_edit, run_unguided
from .schedule import (
    NoiseSchedule,
    forward_noise,
    make_linear_schedule,
    posterior_stats,
    predict_clean,
    stride_schedule,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationConfig",
    "Codec",
    "EditParams",
    "EditResult",
    "EmbeddingVector",
    "GuidanceEncoders",
    "GuidanceParams",
    "IdentityCodec",
    "MetricReport",
    "NoiseSchedule",
    "BundleGeometryError",
    "DegenerateEmbeddingError",
    "GuidanceDivergenceError",
    "ModelLoadError",
    "ScheduleRangeError",
    "ShapeMismatchError",
    "clip_guidance",
    "clip_score",
    "combine_cfg",
    "evaluate_edits",
    "forward_noise",
    "ih_score",
    "make_linear_schedule",
    "mask_to_latent",
    "nerp_loss",
    "posterior_stats",
    "predict_clean",
    "preservation_lpips",
    "psnr",
    "run_edit",
    "run_unguided",
    "segment",
    "sfid",
    "shift_mean",
    "stride_schedule",
    "threshold_mask",
    "total_objective",
]
