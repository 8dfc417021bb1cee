"""Joint stereo event-intensity deblurring and disparity estimation."""
from .model import ModelConfig, StEDNet

__version__ = "0.1.0"

__all__ = ["ModelConfig", "StEDNet"]
