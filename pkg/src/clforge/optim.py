"""Adam-style optimizer with decoupled weight decay."""

import numpy as np


class AdamW:
    """Masked optimizer: only the tensors handed to it are ever updated.

    Moment buffers belong to this instance, so constructing a fresh AdamW at
    a task boundary resets them.
    """

    def __init__(self, params, lr=8e-4, weight_decay=8e-5,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros(p.shape)
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)
