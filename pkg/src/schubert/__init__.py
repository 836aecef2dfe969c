"""Structured pruning of BERT-style encoders along per-layer design dimensions."""
from .config import ArchConfig, PruneConfig, load_preset, toy_config
from .cost import CountFlags, compute_betas, count_flops, count_params, marginal_savings
from .model import init_model, mlm_nsp_loss, model_forward
from .prune import (
    PruneState,
    attach_prune_params,
    fold_and_extract,
    regularized_loss,
    run_schedule,
    select_truncation,
)

__all__ = [
    "ArchConfig",
    "CountFlags",
    "PruneConfig",
    "PruneState",
    "attach_prune_params",
    "compute_betas",
    "count_flops",
    "count_params",
    "fold_and_extract",
    "init_model",
    "load_preset",
    "marginal_savings",
    "mlm_nsp_loss",
    "model_forward",
    "regularized_loss",
    "run_schedule",
    "select_truncation",
    "toy_config",
]
