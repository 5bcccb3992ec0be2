"""Domain expansion with batch-norm statistics control and elastic weight consolidation.

A small numpy reverse-mode autodiff engine, BN-equipped MLP and CNN builders,
EWC, a training loop with fine-tuning modes, dataset surrogates, metrics and
variance probes, and a checkpoint format with BN statistics transplant.
"""
from . import checkpoint, data, ewc, experiment, metrics, nn, tensor, training
from .checkpoint import (Checkpoint, bn_stats_transplant, load_checkpoint, load_network,
                         save_checkpoint)
from .ewc import (DEFAULT_LAMBDA_GRID, EwcConfig, FisherDiagonal, ParameterSnapshot,
                  compute_fisher_diagonal, ewc_penalty, snapshot_parameters)
from .nn import (BatchNorm, Network, StatsMode, cnn_bn, freeze_non_bn, mlp_bn,
                 set_stats_source)
from .tensor import Tensor, backward, no_grad
from .training import (FinetuneMode, StatsSource, TrainConfig, adam_step, evaluate,
                       finetune, fit)

__version__ = "0.1.0"
