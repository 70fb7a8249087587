"""hqseg: hybrid quantum-classical segmentation lab.

A U-Net style encoder/decoder whose bottleneck is a simulated 16-qubit
quanvolution circuit, built on a from-scratch float64 autodiff engine, with
the data pipeline, trainer and metrics needed to exercise it end to end.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad
from .model import HybridUNet, ModelConfig, predict
from .train import TrainConfig

__all__ = ["Tensor", "no_grad", "HybridUNet", "ModelConfig", "TrainConfig", "predict", "__version__"]
