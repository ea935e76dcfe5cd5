"""Image-scaling attacks crafted in the RAW domain, before the ISP.

A perturbed Bayer mosaic is optimized so that the RGB image an ISP produces
from it looks like the clean source, while its downscaled version shows a
different target.
"""

__version__ = "0.1.0"

from .image_core import BayerPattern, RawImage, RgbImage, l2_loss, mosaic  # noqa: E402

__all__ = ["BayerPattern", "RawImage", "RgbImage", "l2_loss", "mosaic", "__version__"]
