"""Full-body texture generation supervised by person re-identification features.

The pipeline: a parametric body mesh is posed per image, rasterized once into a
sparse rendering operator, and a U-Net texture generator is optimized so that
the rendered body matches the input image under layer-wise feature distances
from an identity network.
"""

from retexture import (
    bodymodel,
    dataio,
    generator,
    idnet,
    losses,
    metrics,
    perceptual,
    rendering,
    trainer,
)

__all__ = [
    "bodymodel",
    "dataio",
    "generator",
    "idnet",
    "losses",
    "metrics",
    "perceptual",
    "rendering",
    "trainer",
]

__version__ = "0.1.0"
