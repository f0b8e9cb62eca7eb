"""Adam optimizer over a ParameterStore subset."""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam with bias correction and L2 weight decay folded into the gradient.

    Parameters without a gradient in a given ``step`` are left untouched,
    including their moment state (frozen-parameter contract).
    """

    def __init__(self, store, names, lr, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.names = list(names)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {
            n: {"m": np.zeros_like(store[n].data), "v": np.zeros_like(store[n].data), "t": 0}
            for n in self.names
        }
        self.step_count = 0

    def step(self, grads):
        """Apply one Adam update from ``grads`` (name -> ndarray)."""
        self.step_count += 1
        for name in self.names:
            if name not in grads:
                continue
            p = self.store[name]
            st = self.state[name]
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
