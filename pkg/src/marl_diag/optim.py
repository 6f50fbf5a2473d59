"""Adam with decoupled weight decay and a cosine step-size schedule."""
from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        return lr_max
    frac = min(step, total) / total
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Parameters are given as ordered named groups; ``step`` walks them in that order.

    A parameter whose gradient is missing or identically zero is left untouched,
    including its moments and weight decay. One-dimensional parameters (biases,
    norm gains) are not decayed.
    """

    def __init__(self, groups: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.groups = groups
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}
        self.update_log: list[str] = []

    def step(self, lr: float | None = None, only=None) -> None:
        lr = self.lr if lr is None else lr
        for gname, params in self.groups.items():
            if only is not None and gname not in only:
                continue
            touched = False
            for name, p in params.items():
                g = p.grad
                if g is None or not np.any(g):
                    continue
                touched = True
                t = self.t.get(name, 0) + 1
                self.t[name] = t
                m = self.m.get(name)
                if m is None:
                    m = self.m[name] = np.zeros_like(p.data)
                    self.v[name] = np.zeros_like(p.data)
                v = self.v[name]
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * (g * g)
                mhat = m / (1 - self.b1 ** t)
                vhat = v / (1 - self.b2 ** t)
                upd = mhat / (np.sqrt(vhat) + self.eps)
                if self.weight_decay and p.data.ndim > 1:
                    upd = upd + self.weight_decay * p.data
                p.data = (p.data - lr * upd).astype(p.data.dtype, copy=False)
            if touched:
                self.update_log.append(gname)

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params.values():
                p.grad = None

    def state_dict(self) -> dict:
        out = {}
        for k in self.m:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
            out[f"optim.t.{k}"] = np.array([self.t[k]], dtype=np.int64)
        return out

    def load_state(self, state: dict) -> None:
        for key, arr in state.items():
            if key.startswith("optim.m."):
                name = key[len("optim.m."):]
                self.m[name] = np.array(arr)
                self.v[name] = np.array(state[f"optim.v.{name}"])
                self.t[name] = int(np.asarray(state[f"optim.t.{name}"])[0])
