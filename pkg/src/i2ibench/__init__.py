"""i2ibench: a benchmarking framework for 3D medical image-to-image translation."""

from .volume import FillRule, Mask, Modality, ModalityRange, Volume, resample_trilinear

__version__ = "0.1.0"

__all__ = [
    "FillRule",
    "Mask",
    "Modality",
    "ModalityRange",
    "Volume",
    "resample_trilinear",
    "__version__",
]
