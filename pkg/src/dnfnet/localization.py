"""Gaussian-kernel localization and softmax gating over the DNNF ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

MU_INIT_SCALE = 0.5


@dataclass
class LocalizationParams:
    mu: Tensor  # (n, d) kernel centers
    sigma_diag: Tensor  # (n, d) diagonal scale; its sign is absorbed by the norm
    tau: Tensor  # scalar, sigmoid(tau) is the softmax temperature

    @classmethod
    def init(cls, n: int, d: int, rng: np.random.Generator) -> "LocalizationParams":
        return cls(
            Tensor(MU_INIT_SCALE * rng.standard_normal((n, d)), requires_grad=True, name="mu"),
            Tensor(np.ones((n, d)), requires_grad=True, name="sigma"),
            Tensor(0.0, requires_grad=True, name="tau"),
        )

    @property
    def params(self) -> list[Tensor]:
        return [self.mu, self.sigma_diag, self.tau]


def loc_kernel(x, params: LocalizationParams) -> Tensor:
    """exp(-||sigma_i * (x - mu_i)||_2) for every sample and kernel -> (batch, n)."""
    x = ad.as_tensor(x)
    mu = params.mu
    if x.ndim != 2 or x.shape[1] != mu.shape[1]:
        raise DimensionError(f"loc_kernel: x {x.shape} vs mu {mu.shape}")
    diff = ad.reshape(x, (x.shape[0], 1, x.shape[1])) - ad.reshape(mu, (1,) + mu.shape)
    scaled = diff * ad.reshape(params.sigma_diag, (1,) + mu.shape)
    return ad.exp(-ad.row_norm(scaled))


def sm_loc(x, params: LocalizationParams) -> Tensor:
    """Row-wise softmax of loc_kernel * sigmoid(tau)."""
    return ad.softmax(loc_kernel(x, params) * ad.sigmoid(params.tau), axis=-1)


def gated_embedding(dnnf_outputs, gates) -> Tensor:
    dnnf_outputs, gates = ad.as_tensor(dnnf_outputs), ad.as_tensor(gates)
    if dnnf_outputs.shape != gates.shape:
        raise DimensionError(f"gated_embedding: {dnnf_outputs.shape} vs {gates.shape}")
    return dnnf_outputs * gates
