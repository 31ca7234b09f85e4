from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import ConfigurationError
from .params import ParamSet


@dataclass(frozen=True)
class SgdConfig:
    """SGD hyperparameters: L2 weight decay folded into the gradient, heavy-ball momentum.

    A zero learning rate is accepted so a step can be made a no-op.
    """

    learning_rate: float
    weight_decay: float = 0.0
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(
    params: ParamSet,
    grads: ParamSet,
    cfg: SgdConfig,
    velocity: dict | None = None,
) -> ParamSet:
    """Return updated parameters ``p - lr * (v)`` where ``v = mu*v + g + wd*p``.

    ``velocity`` holds the momentum buffers between calls and is updated in
    place; pass ``None`` (or leave momentum at 0) for memoryless steps.
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise ConfigurationError(f"no gradient for parameters: {missing}")
    out = ParamSet()
    for name, p in params.items():
        d = grads[name] + cfg.weight_decay * p if cfg.weight_decay else grads[name]
        if cfg.momentum:
            if velocity is None:
                raise ConfigurationError("momentum > 0 needs a velocity buffer dict")
            buf = velocity.get(name)
            buf = np.array(d, copy=True) if buf is None else cfg.momentum * buf + d
            velocity[name] = buf
            d = buf
        out[name] = p - cfg.learning_rate * d
    return out
