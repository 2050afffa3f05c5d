from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from crmlab.errors import NonFiniteError
from crmlab.numerics.optim import make_optimizer

log = logging.getLogger(__name__)


@dataclass
class LossTrace:
    epoch_means: list[float] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)


def fit(model, batches, epochs: int, lr: float, optimizer: str = "sgd", log_every: int = 0) -> LossTrace:
    """Generic minibatch loop around ``model.loss_and_grad(batch)``.

    ``batches`` is either a sequence reused every epoch or a callable
    ``epoch -> sequence``. With ``lr == 0`` losses are still computed but no
    update is applied.
    """
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    step = make_optimizer(optimizer, lr) if lr > 0 else None
    trace = LossTrace()
    params = list(model.params)
    for epoch in range(epochs):
        epoch_batches = batches(epoch) if callable(batches) else batches
        total, count = 0.0, 0
        for bi, batch in enumerate(epoch_batches):
            model.params.zero_grad()
            loss = model.loss_and_grad(batch)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch} batch {bi}")
            if step is not None:
                step(params)
            trace.steps.append(loss)
            total += loss
            count += 1
        model.params.zero_grad()
        mean = total / max(count, 1)
        trace.epoch_means.append(mean)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d mean loss %.4f", epoch + 1, mean)
    return trace
