"""docuforge: synthetic document degradation, GAN-based cleaning and PSNR evaluation."""

from .errors import (
    DecodeError,
    DivergenceDetected,
    InvalidArgument,
    IoError,
    NotFound,
    UnsupportedGraph,
)
from .image import ImageTensor, PsnrResult, extract_patches, load_image, mse, normalize, psnr, save_image

__version__ = "0.1.0"
