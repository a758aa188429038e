"""Progressive domain expansion for single-source domain generalization.

A learned synthesizer turns one labeled source domain into a growing pool of
synthetic domains under safety (labels and content survive) and
effectiveness (the new domain is genuinely different and diverse)
objectives, while a task model trains on the expanding pool to learn
domain-invariant representations.  Everything runs on a self-contained
float64 autodiff core; every run is deterministic in (config, seed).
"""

from .autodiff import DomainError, ShapeError, Tensor, constant, parameter
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_datasets, load_config, parse_config
from .datasets import (DomainDataset, FormatError, ShiftSpec, ToySpec, apply_shift,
                       benchmark_suite, load_idx, make_toy_dataset, save_idx,
                       save_pgm_grid)
from .evaluation import (ArmsReport, EvalTable, MetricsRecord, compare_arms,
                         evaluate, export_features, few_shot_adapt, sweep)
from .losses import (LossWeights, PairedBatch, cross_entropy, info_nce,
                     info_nce_complement, loss_adv, loss_adv_reference, loss_cls,
                     loss_cyc, loss_div, loss_src, loss_unseen)
from .nets import (ArchConfig, CycleGenerator, Generator, TaskModel, adain, cycle,
                   forward_task, generate, init_cycle_generator, init_generator,
                   init_task_model)
from .optim import SGD, Adam
from .pipeline import (DomainPool, MetricsLog, RunResult, TrainConfig,
                       TrainingDivergedError, materialize_domain, pretrain,
                       retrain_task, run_pden, train_generator)
from .rng import Rng

__version__ = "0.1.0"
