"""tacfuse: a vision-tactile action-chunking policy with gated
reciprocal cross-modal fusion, trained and evaluated on a synthetic
2-D peg-in-hole world where tight-clearance alignment is visible to
touch but not to the cameras."""

from . import autodiff, checkpoint, config, dataset, encoders, fusion, gradcheck, losses, optim, pegsim, policy
from .autodiff import Tensor, no_grad
from .config import ModelConfig, RunConfig, desk_config, paper_config

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "ModelConfig", "RunConfig", "desk_config", "paper_config",
    "autodiff", "checkpoint", "config", "dataset", "encoders", "fusion", "gradcheck",
    "losses", "optim", "pegsim", "policy",
]
