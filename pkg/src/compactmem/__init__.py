"""Compact K-prior memory for continual learning of generalized linear models."""

from .glm import Family, accuracy, curvature, poly_features, predict, task_loss_grad
from .kprior import (
    KPriorConfig,
    Memory,
    TrainConfig,
    TrainingError,
    batch_train,
    init_params,
    kprior_value_grad,
    train_task,
)
from .ppca import (
    PpcaConfig,
    build_targets_linear,
    build_targets_logistic,
    em_update,
    load_memory,
    save_memory,
    update_memory_linear,
    update_memory_logistic,
    update_memory_svd,
)

__version__ = "0.1.0"
