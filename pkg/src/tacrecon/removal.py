"""Backdoor removal by fine-tuning against the poisoned-class latent perturbation.

The fine-tuning objective on the reference set is::

    mean_i [ CE(f(x_i), y_i) + beta * CE(softmax(W^T (phi(x_i) + s) + b), y_i) ]

with ``s`` held constant. In ``"nopci"`` mode ``s`` is redrawn uniformly from
the pool of all class perturbations for every mini-batch, which needs no
poisoned-class identification.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from tacrecon.core import ContractError, as_vector, make_rng
from tacrecon.nn import Dataset, MlpParams, TrainConfig, TrainResult, loss_and_grads, sgd_epochs

log = logging.getLogger(__name__)

MODES = ("pci", "nopci")


@dataclass
class RemovalConfig:
    beta: float = 0.5
    epochs: int = 50
    lr: float = 0.01
    batch_size: int = 32
    seed: int = 0
    mode: str = "pci"
    stop_grad_latent: bool = False  # second term updates only the final layer
    min_steps: int = 0  # raise epochs so that at least this many SGD steps run

    def __post_init__(self):
        if self.beta < 0:
            raise ContractError("beta must be nonnegative")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")

    def train_config(self, n_ref: int) -> TrainConfig:
        steps_per_epoch = -(-n_ref // self.batch_size)
        epochs = max(self.epochs, -(-self.min_steps // max(steps_per_epoch, 1)))
        return TrainConfig(epochs=epochs, lr=self.lr, batch_size=self.batch_size, seed=self.seed)


def _removal_objective(shift_for_batch, beta: float, stop_grad_latent: bool):
    def objective(params, X, y):
        loss, _, _, gw, gb = loss_and_grads(
            params, X, y, shift=shift_for_batch(), beta=beta, stop_grad_latent=stop_grad_latent
        )
        return loss, gw, gb
    return objective


def finetune_remove_trace(params_bd: MlpParams, ref: Dataset, s_p, cfg: RemovalConfig) -> TrainResult:
    s_p = as_vector(s_p)
    if s_p.shape[0] != params_bd.d_emb:
        raise ContractError(f"perturbation has length {s_p.shape[0]}, latent width is {params_bd.d_emb}")
    objective = _removal_objective(lambda: s_p, cfg.beta, cfg.stop_grad_latent)
    return sgd_epochs(params_bd, ref, cfg.train_config(len(ref)), objective)


def finetune_remove(params_bd: MlpParams, ref: Dataset, s_p, cfg: RemovalConfig) -> MlpParams:
    """Fine-tune so that reference latents shifted by ``s_p`` keep their true labels."""
    return finetune_remove_trace(params_bd, ref, s_p, cfg).params


def finetune_remove_nopci_trace(params_bd: MlpParams, ref: Dataset, all_s, cfg: RemovalConfig) -> TrainResult:
    pool = [as_vector(s) for s in all_s if s is not None]
    if not pool:
        raise ContractError("empty perturbation pool")
    for s in pool:
        if s.shape[0] != params_bd.d_emb:
            raise ContractError("pool vector length does not match the latent width")
    # separate stream so batch order matches the single-perturbation run
    pick = make_rng(cfg.seed, "perturbation-pool")
    objective = _removal_objective(lambda: pool[int(pick.integers(len(pool)))], cfg.beta, cfg.stop_grad_latent)
    return sgd_epochs(params_bd, ref, cfg.train_config(len(ref)), objective)


def finetune_remove_nopci(params_bd: MlpParams, ref: Dataset, all_s, cfg: RemovalConfig) -> MlpParams:
    """Ablation without class identification: ``s`` drawn from the whole pool per mini-batch.

    ``None`` entries (infeasible classes) are dropped from the pool.
    """
    return finetune_remove_nopci_trace(params_bd, ref, all_s, cfg).params


def removal_objective_value(params: MlpParams, ref: Dataset, s_p, beta: float) -> float:
    loss, _, _, _, _ = loss_and_grads(params, ref.inputs, ref.labels, shift=np.asarray(s_p, float), beta=beta)
    return loss


def finetune_remove_recompute(params_bd: MlpParams, ref: Dataset, k: int, cfg: RemovalConfig,
                              every: int, solver_cfg=None) -> MlpParams:
    """Experimental: re-solve the class-``k`` perturbation every ``every`` epochs.

    Each chunk of epochs reuses the configured schedule with the seed offset by
    the chunk index. Chunks whose QP is infeasible keep the last feasible ``s``.
    """
    from tacrecon.nn import latent_batch
    from tacrecon.qp import solve_class

    if every < 1:
        raise ContractError("recompute interval must be at least one epoch")
    params = params_bd
    s = None
    total = cfg.train_config(len(ref)).epochs
    done = chunk = 0
    while done < total:
        res = solve_class(latent_batch(params, ref.inputs), params.final_layer, k, solver_cfg)
        if res.s is not None:
            s = res.s
        if s is None:
            raise ContractError(f"class {k} has no feasible perturbation")
        n = min(every, total - done)
        chunk_cfg = RemovalConfig(beta=cfg.beta, epochs=n, lr=cfg.lr, batch_size=cfg.batch_size,
                                  seed=cfg.seed + chunk, mode=cfg.mode, stop_grad_latent=cfg.stop_grad_latent)
        params = finetune_remove(params, ref, s, chunk_cfg)
        log.debug("recompute chunk %d: |s|=%.4f", chunk, float(np.linalg.norm(s)))
        done += n
        chunk += 1
    return params
