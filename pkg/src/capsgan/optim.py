"""Adam with bias correction, operating on named parameter collections.

Updates happen in plain numpy outside any tape: gradients are extracted as
arrays, moments live as arrays, and each step produces fresh leaf tensors
(parameters are never mutated in place).
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.5, beta2=0.9, eps=1e-8):
        if lr <= 0 or not (0.0 <= beta1 < 1.0) or not (0.0 <= beta2 < 1.0):
            raise ValueError("bad Adam hyperparameters")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(v.shape, dtype=v.data.dtype) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=v.data.dtype) for k, v in params.items()}

    def step(self, params, grads):
        """One update over every named parameter.  `grads` maps name to a
        numpy array (or Tensor); returns the dict of replacement tensors."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, p in params.items():
            g = grads[name]
            if isinstance(g, Tensor):
                g = g.data
            g = np.asarray(g, dtype=p.data.dtype)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != {p.shape} for {name}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            new = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            out[name] = Tensor(new.astype(p.data.dtype, copy=False))
        return out

    def state_arrays(self):
        out = {"opt.t": np.array([float(self.t)], dtype=np.float32)}
        for k, a in self.m.items():
            out[f"opt.m.{k}"] = np.array(a, copy=True)
        for k, a in self.v.items():
            out[f"opt.v.{k}"] = np.array(a, copy=True)
        return out

    def load_arrays(self, arrays):
        self.t = int(round(float(np.asarray(arrays["opt.t"]).reshape(-1)[0])))
        for k in self.m:
            self.m[k] = np.asarray(arrays[f"opt.m.{k}"], dtype=self.m[k].dtype).reshape(self.m[k].shape)
            self.v[k] = np.asarray(arrays[f"opt.v.{k}"], dtype=self.v[k].dtype).reshape(self.v[k].shape)
