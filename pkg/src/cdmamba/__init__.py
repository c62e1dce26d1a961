"""Cloud detection with a four-direction selective state-space U-Net, in numpy.

Modules:

* :mod:`cdmamba.tensor` - tensors, tape-based reverse-mode autodiff, primitives
* :mod:`cdmamba.container` - binary tensor container and weight stores
* :mod:`cdmamba.ssm` - zero-order-hold discretisation and the selective scan
* :mod:`cdmamba.smb` - the channel-split four-direction block
* :mod:`cdmamba.attention` - heavy and light dual-attention skips
* :mod:`cdmamba.network` - the six-stage encoder/decoder
* :mod:`cdmamba.losses` - BCE + Dice objective and confusion metrics
* :mod:`cdmamba.trainer`, :mod:`cdmamba.synthetic`, :mod:`cdmamba.gradcheck`
* :mod:`cdmamba.pipeline`, :mod:`cdmamba.cli`
"""

from .losses import ConfusionCounts, LossConfig, bce_loss, dice_loss, metrics, overall_loss
from .network import NetworkConfig, NetworkParams, forward, init_params, param_count
from .ssm import SsmParams, discretize_zoh, selective_scan, ssm_scan
from .tensor import Tape, Tensor
from .trainer import TrainConfig, adamw_step, cosine_lr, train

__version__ = "0.1.0"

__all__ = [
    "ConfusionCounts", "LossConfig", "NetworkConfig", "NetworkParams", "SsmParams",
    "Tape", "Tensor", "TrainConfig", "adamw_step", "bce_loss", "cosine_lr", "dice_loss",
    "discretize_zoh", "forward", "init_params", "metrics", "overall_loss", "param_count",
    "selective_scan", "ssm_scan", "train",
]
