"""Single-network self-ensemble denoising with decoupled attention fusion.

One frozen residual denoiser is run on 13 versions of the noisy input
(identity, seven rotations/mirrors, five DCT band-stop masks); the 13
outputs are fused by averaging or by learned spatial/channel attention.
"""

from .analysis import (
    CorrelationMatrix,
    ErrorSample,
    correlation_matrix,
    error_distribution,
    evaluation_report,
    psnr,
)
from .archive import ArchiveError, WeightArchive
from .backbone import DenoiserSpec, ResidualDenoiser, add_awgn, denoise, train_backbone
from .ensemble import EnsembleStack, SelfEnsemble, average_fuse, build_stack
from .fusion import AttentionFusion, FusionWeights, dual_fuse, fuse, single_path_fuse, train_fusion
from .transforms import MASK_CATALOG, ManipulationId, apply_frequency_mask, build_mask, dct2, idct2
from .validation import NumericalError

__version__ = "0.1.0"

__all__ = [
    "ArchiveError", "AttentionFusion", "CorrelationMatrix", "DenoiserSpec", "EnsembleStack",
    "ErrorSample", "FusionWeights", "MASK_CATALOG", "ManipulationId", "NumericalError",
    "ResidualDenoiser", "SelfEnsemble", "WeightArchive", "add_awgn", "apply_frequency_mask",
    "average_fuse", "build_mask", "build_stack", "correlation_matrix", "dct2", "denoise",
    "dual_fuse", "error_distribution", "evaluation_report", "fuse", "idct2", "psnr",
    "single_path_fuse", "train_backbone", "train_fusion",
]
