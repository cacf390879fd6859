"""Blind image quality assessment on top of a text-conditioned denoising U-Net."""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build_config
from .distill import StudentConfig, StudentModel, train_student
from .evaluation import EvalReport, saliency_map
from .model import ModelConfig, TeacherModel, predict
from .training import LossConfig, TrainSchedule, train_teacher

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "LossConfig",
    "ModelConfig",
    "RunConfig",
    "StudentConfig",
    "StudentModel",
    "TeacherModel",
    "TrainSchedule",
    "build_config",
    "load_checkpoint",
    "predict",
    "saliency_map",
    "save_checkpoint",
    "train_student",
    "train_teacher",
]
