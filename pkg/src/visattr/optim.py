"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError


class Adam:
    """Adam with zero-initialized moments and bias correction.

    Defaults: lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8. Moment buffers
    live in ``state`` keyed by parameter name so they can be checkpointed
    and restored exactly.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.state = {name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
                      for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """One update using each parameter's accumulated gradient."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                grad = np.zeros_like(p.data)
            if grad.shape != p.data.shape:
                raise DimensionError(f"gradient shape {grad.shape} does not match parameter "
                                     f"{name} of shape {p.data.shape}")
            st = self.state[name]
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * grad
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * grad * grad
            m_hat = st["m"] / bc1
            v_hat = st["v"] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    # -- checkpoint support ----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"adam/step": np.asarray([float(self.step_count)])}
        for name, st in self.state.items():
            out[f"adam/{name}/m"] = st["m"]
            out[f"adam/{name}/v"] = st["v"]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["adam/step"][0])
        for name in self.state:
            self.state[name]["m"] = arrays[f"adam/{name}/m"].copy()
            self.state[name]["v"] = arrays[f"adam/{name}/v"].copy()
