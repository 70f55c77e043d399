"""One-generation teacher-student training with per-sample long- and short-term teachers."""
from .autodiff import Tape, Tensor, backward
from .data import LabeledDataset, gen_spiral, shuffle_epoch
from .distill import LossBreakdown, TeacherStore, assemble_loss
from .experiment import compare_runs, parse_config, run_experiment
from .models import ModelArch, ModelParams, forward, init_params, param_count
from .optim import LrSchedule, SgdState, lr_at, sgd_nesterov_step
from .policies import PolicyConfig, RunReport, TrainSettings, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "LabeledDataset",
    "LossBreakdown",
    "LrSchedule",
    "ModelArch",
    "ModelParams",
    "PolicyConfig",
    "RunReport",
    "SgdState",
    "Tape",
    "TeacherStore",
    "Tensor",
    "TrainSettings",
    "assemble_loss",
    "backward",
    "compare_runs",
    "evaluate",
    "forward",
    "gen_spiral",
    "init_params",
    "lr_at",
    "param_count",
    "parse_config",
    "run_experiment",
    "sgd_nesterov_step",
    "shuffle_epoch",
    "train",
]
