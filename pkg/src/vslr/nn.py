"""Parameter containers and initializers shared by the model modules."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with draws outside two deviations redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class LinearParams:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float32):
        self.w = Tensor(trunc_normal(rng, (d_in, d_out), dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNormParams:
    def __init__(self, dim: int, dtype=np.float32):
        self.g = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.g": self.g, f"{prefix}.b": self.b}
