"""Plain and momentum SGD over a ParamStore's trainable tensors."""

from typing import Dict, Mapping

import numpy as np

from core.params import ParamStore


class SGD:
    """
    p <- p - lr * v, with v <- momentum * v + g (v = g when momentum is 0).
    Updates only the names present in the gradient map.
    """

    def __init__(self, store: ParamStore, lr: float, momentum: float = 0.0):
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self._velocity: Dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name in sorted(grads):
            g = grads[name]
            if self.momentum:
                v = self._velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[name] = v
                g = v
            self.store[name].sub_(self.lr * g)
