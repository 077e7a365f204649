"""From-scratch convolutional encoder-decoder toolkit for cross-modal
image synthesis: index-based unpooling, skip connections, SISO/MISO/MIMO
topologies, a weighted L2 + SSIM + TV joint loss with hand-derived
gradients, SGD with momentum, and a finite-difference verification suite.
"""

from .tensor import RngStream, ShapeError, ParameterError
from .model import Topology, SynNetModel, build_model
from .loss import LossWeights, SsimConfig, LossReport
from .optim import OptimState, TrainConfig, sgd_step, train

__all__ = [
    "RngStream", "ShapeError", "ParameterError",
    "Topology", "SynNetModel", "build_model",
    "LossWeights", "SsimConfig", "LossReport",
    "OptimState", "TrainConfig", "sgd_step", "train",
]

__version__ = "0.1.0"
