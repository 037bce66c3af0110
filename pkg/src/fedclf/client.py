"""Local training step: one client trains on the received global model.

The statistics the server needs for selection are measured at the *received*
parameters, before any weight update, so utilities always rank clients
against the model they were handed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ClientDataset
from .model import ModelParams, TrainConfig, evaluate, sgd_epochs

__all__ = ["ClientUpdateResult", "client_update", "rms_utility"]


@dataclass(frozen=True)
class ClientUpdateResult:
    """What a client reports back after a round.

    ``loss_utility`` is ``n_k * RMS(per-sample losses)``; ``mean_loss`` is the
    plain mean of the same losses.  ``grad_norm_utility`` (``n_k * RMS`` of
    per-sample gradient norms) is present only when requested.
    ``post_training_loss`` is a diagnostic: the local mean loss after the
    weight update.
    """

    client_id: int
    new_params: ModelParams
    loss_utility: float
    mean_loss: float
    n_k: int
    weight_delta_norm: float
    post_training_loss: float
    grad_norm_utility: float | None = None


def rms_utility(per_sample: np.ndarray) -> float:
    """Sample count times the root-mean-square of per-sample values."""
    per_sample = np.asarray(per_sample, dtype=np.float64)
    return float(per_sample.size * np.sqrt(np.mean(per_sample**2)))


def client_update(
    client: ClientDataset,
    global_params: ModelParams,
    cfg: TrainConfig,
    want_grad_norm: bool = False,
) -> ClientUpdateResult:
    """Measure utilities at the received params, then train locally."""
    report = evaluate(
        global_params,
        client.data,
        want_per_sample=True,
        want_grad_norms=want_grad_norm,
    )
    grad_norm_utility = None
    if want_grad_norm:
        grad_norm_utility = rms_utility(report.per_sample_grad_norms)
    new_params = sgd_epochs(global_params, client.data, cfg)
    delta = float(np.linalg.norm(new_params.values - global_params.values))
    post_loss = evaluate(new_params, client.data).mean_loss
    return ClientUpdateResult(
        client_id=client.client_id,
        new_params=new_params,
        loss_utility=rms_utility(report.per_sample_losses),
        mean_loss=report.mean_loss,
        n_k=client.n_k,
        weight_delta_norm=delta,
        post_training_loss=post_loss,
        grad_norm_utility=grad_norm_utility,
    )
