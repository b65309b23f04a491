"""Egocentric body pose estimation from camera motion, scene context and the
second person's pose.

The package is numpy-only: skeleton normalization, feature extraction,
pose codebooks, a two-layer LSTM with hand-written backpropagation,
training, evaluation and a synthetic coupled-interaction generator.
"""

from .codebook import FullBodyCodebook, PoseCodebook, build_codebook, build_single_codebook, quantization_stats
from .dataio import Dataset, SequenceRecord, load_dataset
from .errors import EgoPoseError
from .evaluation import EvalReport, PoseModel, evaluate, substitute_second_person, train_pose_model
from .model import ModelConfig, ModelParams, SequenceBatch, decode, forward, init_params, loss_and_grads
from .skeleton import KINECT_25, JointLayout, align_for_eval, normalize_person_centric
from .synthdata import SynthConfig, generate, synthesize
from .training import TrainConfig, TrainState, load_checkpoint, save_checkpoint, train, window_bounds

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EgoPoseError",
    "EvalReport",
    "FullBodyCodebook",
    "JointLayout",
    "KINECT_25",
    "ModelConfig",
    "ModelParams",
    "PoseCodebook",
    "PoseModel",
    "SequenceBatch",
    "SequenceRecord",
    "SynthConfig",
    "TrainConfig",
    "TrainState",
    "align_for_eval",
    "build_codebook",
    "build_single_codebook",
    "decode",
    "evaluate",
    "forward",
    "generate",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "loss_and_grads",
    "normalize_person_centric",
    "quantization_stats",
    "save_checkpoint",
    "substitute_second_person",
    "synthesize",
    "train",
    "train_pose_model",
    "window_bounds",
]
