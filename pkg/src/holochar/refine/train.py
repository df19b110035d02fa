"""Adam and the training loop.

The loop is deterministic given the seed baked into the networks and the step
function: no shuffling happens here.  A rolling copy of the parameters from
the last finite step backs the halt-on-NaN path.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import NumericError, ValidationError
from .ops import Param
from .weights_io import save_weights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    steps: int = 5000
    seed: int = 0
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning rate must be >= 0")
        if self.steps < 1:
            raise ValidationError("step budget must be positive")


class Adam:
    def __init__(self, params: list[Param], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in params]
        self._v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.value -= p.value.dtype.type(self.lr) * update.astype(p.value.dtype, copy=False)


def train(
    step_fn,
    params: list[Param],
    config: TrainConfig,
    checkpoint_dir=None,
    curve_path=None,
    stop_fn=None,
):
    """Run Adam over `step_fn`.

    `step_fn(step_index)` must zero the gradients, run forward/backward over
    its frames, accumulate gradients into `params`, and return a metrics dict
    containing at least "loss".  Checkpoints are written every
    `checkpoint_interval` steps when a directory is given; a non-finite loss
    halts with the last finite parameters checkpointed.  `stop_fn(metrics)`
    may end training early (the criterion it tests is up to the caller).
    """
    adam = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    curve: list[dict] = []
    last_good = [p.value.copy() for p in params]
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    for step in range(config.steps):
        metrics = step_fn(step)
        loss = float(metrics["loss"])
        if not np.isfinite(loss):
            for p, backup in zip(params, last_good):
                p.value[...] = backup
            where = None
            if checkpoint_dir is not None:
                checkpoint_dir.mkdir(parents=True, exist_ok=True)
                where = checkpoint_dir / "last_good.hcwt"
                save_weights(where, params)
            raise NumericError(
                f"non-finite loss at step {step}" + (f"; last good weights at {where}" if where else "")
            )
        for p, backup in zip(params, last_good):
            backup[...] = p.value
        adam.step()
        curve.append({"step": step, **{k: float(v) for k, v in metrics.items()}})
        if checkpoint_dir is not None and (step + 1) % config.checkpoint_interval == 0:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            save_weights(checkpoint_dir / f"step{step + 1:06d}.hcwt", params)
        if stop_fn is not None and stop_fn(curve[-1]):
            log.info("early stop at step %d", step)
            break
    if curve_path is not None:
        write_curve(curve_path, curve)
    return curve


def write_curve(path, curve: list[dict]) -> None:
    if not curve:
        return
    keys = list(curve[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in curve:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
