"""Non-neural pipeline for dermoscopy lesion challenges.

Color constancy, seeded augmentation, segmentation post-processing (dense CRF,
watershed, largest component), attribute masking, hierarchical class fusion and
challenge scoring.
"""
from .imgcore import (ATTRIBUTES, CLASSES, BinaryMask, ClassDistribution, ConfusionMatrix,
                      DataError, FormatError, ProbMap, RgbImage)

__version__ = "0.1.0"

__all__ = [
    "ATTRIBUTES",
    "CLASSES",
    "BinaryMask",
    "ClassDistribution",
    "ConfusionMatrix",
    "DataError",
    "FormatError",
    "ProbMap",
    "RgbImage",
]
