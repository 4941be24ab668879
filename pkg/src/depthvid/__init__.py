"""One-shot depth-conditioned text-to-video diffusion, built on a small numpy autodiff engine."""

from .model import UNetConfig, VideoDiffusionModel, load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule, linear_schedule
from .tensor import Tape, Tensor, backward, grad_check, randn

__version__ = "0.1.0"
