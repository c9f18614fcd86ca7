"""Cross-slice attention segmentation on anisotropic volumes."""

from .tensor import Tensor, backward, grad_check
from .attention import (CsamParams, LowRankGaussian, AttentionRecord,
                        csam_forward, csam_param_count, init_csam)
from .networks import BackboneConfig, PipelineConfig, SegNet, is_2p5d
from .training import TrainConfig, fit
from .data import Volume, PhantomSpec, generate_phantom, read_volume, write_volume
from .metrics import dsc_3d, ravd, patient_auc, mann_whitney_u

__all__ = [
    "Tensor", "backward", "grad_check",
    "CsamParams", "LowRankGaussian", "AttentionRecord", "csam_forward",
    "csam_param_count", "init_csam",
    "BackboneConfig", "PipelineConfig", "SegNet", "is_2p5d",
    "TrainConfig", "fit",
    "Volume", "PhantomSpec", "generate_phantom", "read_volume", "write_volume",
    "dsc_3d", "ravd", "patient_auc", "mann_whitney_u",
]

__version__ = "0.1.0"
