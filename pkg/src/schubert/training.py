"""Plain Adam training on the masked-LM + next-sentence objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Adam, NonFiniteError, no_grad
from .model import mlm_nsp_loss


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, detail):
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step


@dataclass
class StepLog:
    step: int
    mlm: float
    nsp: float
    total: float


def train(weights, batches, steps, lr=1e-3, log=None):
    """Run ``steps`` Adam updates on every tensor of ``weights``.

    A fresh optimizer is created per call.  Returns one :class:`StepLog`
    per step with the loss measured before that step's update.
    """
    weights.set_trainable(True)
    opt = Adam(weights.parameters(), lr=lr)
    history = []
    batches = iter(batches)
    for step in range(1, steps + 1):
        batch = next(batches)
        try:
            total, mlm, nsp = mlm_nsp_loss(weights, batch)
            opt.zero_grad()
            total.backward()
            opt.step()
        except NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from None
        entry = StepLog(step, mlm.item(), nsp.item(), total.item())
        history.append(entry)
        if log is not None:
            log(entry)
    return history


def evaluate(weights, batches):
    """Mean ``(mlm, nsp)`` over batches, weighting MLM by masked-token count."""
    mlm_sum = n_tok = 0.0
    nsp_sum = n_ex = 0.0
    with no_grad():
        for batch in batches:
            _, mlm, nsp = mlm_nsp_loss(weights, batch)
            k = len(batch.mlm_targets)
            mlm_sum += mlm.item() * k
            n_tok += k
            nsp_sum += nsp.item() * len(batch)
            n_ex += len(batch)
    return (mlm_sum / n_tok if n_tok else 0.0), (nsp_sum / n_ex if n_ex else float(np.nan))
