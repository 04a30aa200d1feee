"""Self-supervised encoders: MoCo v2, BYOL, MSF, RotNet and Jigsaw."""
from .config import AugmentationPolicy, MethodConfig, OptimizerConfig, ScheduleConfig
from .methods import build_method
from .train import EncoderCheckpoint, initial_model, train
