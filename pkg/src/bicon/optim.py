"""AdamW with decoupled weight decay over named leaf tensors."""

from __future__ import annotations

import numpy as np

from .errors import NumericalError
from .tensor import Tensor


class AdamW:
    """Standard AdamW: bias-corrected moments, decay applied to the
    parameter directly (not through the gradient).

    ``params`` is a list of (name, Tensor) leaves; names are kept so the
    optimizer state can be checkpointed alongside the parameters.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def zero_grad(self):
        for _, t in self.params:
            t.grad = None

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, t in self.params:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if np.isnan(g).any():
                raise NumericalError(f"NaN gradient in parameter '{name}'")
            if self.weight_decay != 0.0:
                t.data *= 1.0 - self.lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            t.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_tensors(self):
        """Moment buffers as (name, array) pairs for checkpointing."""
        out = []
        for name, _ in self.params:
            out.append((f"adamw.m.{name}", self.m[name]))
            out.append((f"adamw.v.{name}", self.v[name]))
        return out

    def load_state(self, arrays, step_count: int):
        """Restore moments (dict of checkpoint name -> array) and step."""
        from .errors import CheckpointError

        for name, _ in self.params:
            for prefix, store in (("adamw.m.", self.m), ("adamw.v.", self.v)):
                key = prefix + name
                if key not in arrays:
                    raise CheckpointError(f"checkpoint is missing optimizer buffer '{key}'")
                arr = arrays[key]
                if arr.shape != store[name].shape:
                    raise CheckpointError(
                        f"optimizer buffer '{key}' has shape {arr.shape}, expected {store[name].shape}"
                    )
                store[name] = arr.copy()
        self.step_count = int(step_count)


def clamp_(t: Tensor, minimum: float):
    """In-place lower clamp on a tensor's data (post-step constraint)."""
    np.maximum(t.data, minimum, out=t.data)
