"""All-in-one adverse-weather image restoration with sparse expert routing.

The package restores images degraded by rain, snow, haze, and raindrops
with a single model.  A structured weather descriptor stands in for a
vision-language description of the scene; it is embedded, cross-attended
against image features into a per-pixel degradation map, and used to route
each pixel to its top-K restoration experts (trainable convolution
filters) out of a larger bank, executing only the selected ones.

Main entry points: :class:`WeatherRestorer` (sklearn-style estimator),
the :mod:`unweather.cli` command line, and the lower-level modules
(tensor, model, trainer, synthdata, analysis).
"""

__version__ = "0.1.0"

from .estimator import WeatherRestorer
from .losses import psnr, ssim
from .model import ModelConfig, ModelState, forward
from .prior import DegradationDescriptor
from .tensor import Tensor
from .trainer import TrainConfig, train

__all__ = [
    "WeatherRestorer",
    "DegradationDescriptor",
    "ModelConfig",
    "ModelState",
    "TrainConfig",
    "Tensor",
    "forward",
    "psnr",
    "ssim",
    "train",
    "__version__",
]
