"""Hypersphere embedding for adversarial training, on a small numpy autodiff core."""
from .diffcore import ContractError, NumericError, Tensor
from .spherehead import ArchitectureSpec, HeadConfig, Model, ModelParams, init_params, predict
from .objectives import ObjectiveSpec, for_framework, training_loss
from .attacks import AttackSpec, GradEstimatorSpec, iterative_attack, pgd, zo_attack, zo_gradient
from .trainer import TrainSpec, TrainHistory, TrainingAborted, evaluate, train
from .datahub import Dataset, CorruptionSpec, make_two_moons, load_idx_images, corrupt, batches

__version__ = "0.1.0"
