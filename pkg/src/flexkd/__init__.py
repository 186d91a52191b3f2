"""Feature distillation from selected task-relevant teacher units."""

from .attribution import (
    ImportanceProfile,
    SelectionSet,
    activation_sparsity_profile,
    aggregate_importance,
    per_sample_importance,
    rank_neurons,
    select_top,
)
from .autograd import Tensor, grad_wrt, no_grad
from .errors import ConfigError, DataError, DimensionError, FlexKDError, GraphError, NumericError
from .losses import LossWeights, ProjectorHead, composite_loss, cross_correlation, flex_kd_loss, logit_kd_loss, projector_loss
from .models import Checkpoint, MLPConfig, TinySeqConfig, init_model
from .training import DistillationPlan, TrainConfig, distill, evaluate, train_teacher

__version__ = "0.1.0"
