"""Adam with bias correction, updating parameter arrays in place."""
import numpy as np

from ..errors import NumericalError


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, grads=None):
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        if self.weight_decay:
            # decoupled decay on weight matrices only
            for k, p in self.params.items():
                if k.endswith(".weight") and grads.get(k) is not None:
                    p.data *= 1.0 - self.lr * self.weight_decay
        adam_step(self.params, grads, self.m, self.v, self.t + 1,
                  self.lr, self.beta1, self.beta2, self.eps)
        self.t += 1


def adam_step(params, grads, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update at step ``t`` (1-based). Missing gradients are skipped."""
    for k, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{k}'")
        m[k] *= beta1
        m[k] += (1 - beta1) * g
        v[k] *= beta2
        v[k] += (1 - beta2) * g * g
        mhat = m[k] / (1 - beta1 ** t)
        vhat = v[k] / (1 - beta2 ** t)
        p = params[k]
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
