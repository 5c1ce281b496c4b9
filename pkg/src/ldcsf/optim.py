"""SGD with heavy-ball momentum and L2 weight decay."""

from dataclasses import dataclass

import numpy as np


@dataclass
class SgdConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_step(params, velocities, cfg):
    """One in-place update over ``params`` (name -> Tensor).

    ``velocities`` maps name -> buffer and is filled with zeros on first use::

        v <- momentum * v + (grad + weight_decay * param)
        param <- param - lr * v
    """
    for name, p in params.items():
        if p.grad is None:
            raise RuntimeError(f"parameter {name!r} has no gradient")
        v = velocities.get(name)
        if v is None:
            v = velocities[name] = np.zeros_like(p.data)
        d = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
        v *= cfg.momentum
        v += d
        p.data -= cfg.learning_rate * v
    return params


class SGD:
    """Stateful wrapper: owns the velocity buffers for a fixed parameter set."""

    def __init__(self, named_params, cfg=None):
        self.params = dict(named_params)
        self.cfg = cfg or SgdConfig()
        self.velocities = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        sgd_step(self.params, self.velocities, self.cfg)

    def state_dict(self):
        return {name: v.copy() for name, v in self.velocities.items()}

    def load_state_dict(self, state):
        unknown = set(state) - set(self.params)
        if unknown:
            raise KeyError(f"velocity for unknown parameters: {sorted(unknown)[:3]}")
        self.velocities = {}
        for name, v in state.items():
            if v.shape != self.params[name].shape:
                raise ValueError(f"velocity shape mismatch for {name}")
            self.velocities[name] = np.array(v, dtype=self.params[name].dtype)
