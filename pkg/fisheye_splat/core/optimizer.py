# ============================================
# core/optimizer.py
# ============================================
"""
Adam over named parameter groups (one per Gaussian field and scene
partition) with an exponentially decaying position learning rate.
"""
import math

import numpy as np

from fisheye_splat.core.config import LearningRates
from fisheye_splat.core.gaussian_core import GaussianSet, quat_normalize
from fisheye_splat.core.log_utils import get_logger

logger = get_logger(__name__)

BETAS = (0.9, 0.999)
EPS = 1e-15

FIELD_RATES = {
    "rotations": "rotation",
    "log_scales": "scaling",
    "opacity_logits": "opacity",
    "sh": "sh",
    "semantic_logits": "semantic",
    "intensity_logits": "intensity",
}


class AdamOptimizer:
    def __init__(self, rates: LearningRates, extent: float = 1.0, total_steps: int = 0,
                 betas=BETAS, eps: float = EPS):
        self.rates = rates
        self.extent = float(extent)
        self.decay_steps = rates.position_decay_steps or max(int(total_steps), 1)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = {}

    def position_lr(self, iteration: int) -> float:
        t = min(max(iteration / self.decay_steps, 0.0), 1.0)
        log_lr = (1.0 - t) * math.log(self.rates.position_init) + t * math.log(self.rates.position_final)
        return math.exp(log_lr) * self.extent

    def field_lr(self, field_name: str, iteration: int) -> float:
        if field_name == "means":
            return self.position_lr(iteration)
        return getattr(self.rates, FIELD_RATES[field_name])

    def update(self, key: str, value: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        """One Adam step for the array stored under ``key``; returns the new value."""
        m, v, t = self.state.get(key, (np.zeros_like(value), np.zeros_like(value), 0))
        if m.shape != value.shape:
            raise ValueError(f"optimizer state for '{key}' has shape {m.shape}, parameter has {value.shape}")
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        self.state[key] = (m, v, t)
        return value - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, name: str, params: GaussianSet, grads: GaussianSet, iteration: int) -> GaussianSet:
        """Update every field of a partition in place; rotations are renormalized afterwards."""
        for field_name in ("means",) + tuple(FIELD_RATES):
            value = getattr(params, field_name)
            if value.size == 0:
                continue
            lr = self.field_lr(field_name, iteration)
            setattr(params, field_name, self.update(f"{name}.{field_name}", value, getattr(grads, field_name), lr))
        if len(params):
            params.rotations = quat_normalize(params.rotations)
        return params

    def reset_rows(self, name: str, rows) -> None:
        """Zero the moment estimates of the given rows of every field of a partition."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            return
        prefix = f"{name}."
        for key, (m, v, t) in self.state.items():
            if key.startswith(prefix):
                m[rows] = 0.0
                v[rows] = 0.0
