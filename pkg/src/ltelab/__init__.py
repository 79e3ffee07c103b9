"""Desk-scale RLVR lab: GRPO, GRPO with extra rollouts, and hinted trial-and-error rollouts."""

__version__ = "0.1.0"

from ._backend import BACKEND  # noqa: E402
from .config import Mode, TrainConfig, load_config  # noqa: E402
from .env import HintSpec, HintVariant, Query, extract_answer, generate_task, render_prompt, verify  # noqa: E402
from .grpo import compute_advantages, grpo_loss_and_grad  # noqa: E402
from .lte import classify_group, mixed_loss_and_grad, replace, select_hint, shape_ratio  # noqa: E402
from .metrics import mean_at_k, pass_at_k  # noqa: E402
from .policy import PolicyParams, PolicyShape, init_params, load_checkpoint, save_checkpoint  # noqa: E402
from .theory import pruning_bound  # noqa: E402

__all__ = [
    "BACKEND", "Mode", "TrainConfig", "load_config", "HintSpec", "HintVariant", "Query",
    "extract_answer", "generate_task", "render_prompt", "verify", "compute_advantages",
    "grpo_loss_and_grad", "classify_group", "mixed_loss_and_grad", "replace", "select_hint",
    "shape_ratio", "mean_at_k", "pass_at_k", "PolicyParams", "PolicyShape", "init_params",
    "load_checkpoint", "save_checkpoint", "pruning_bound",
]
