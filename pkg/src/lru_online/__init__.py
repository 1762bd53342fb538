"""Online learning for deep networks of linear recurrent units."""
from .learning import (GradientEstimate, OnlineLearner, RuleKind, Trainer, bptt_gradient,
                       cosine_alignment, layer_cosines, online_sequence_gradient)
from .lru import LruParams, SensitivityState, init_lru, lambda_of, lru_step, trace_step
from .network import ModelConfig, Network, forward_step, spatial_backward_step
from .optim import OptimConfig, adamw_step, lr_at
from .tasks import CopyTaskBatch, CopyTaskConfig, generate_copy_batch

__version__ = "0.1.0"
