"""Learned feature selection: stochastic mask, straight-through binary mask and
the alpha-blended elastic-net style regularizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

P_GROUPS = (0.1, 0.3, 0.5, 0.7, 0.9)
BETA_GRID = (1.6, 1.3, 1.0, 0.7, 0.4, 0.1)
MT_INIT_SLACK = (0.2, 0.7)


def sample_stochastic_mask(d: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(p) binary mask of length ``d``, redrawn until nonempty."""
    if not 0 < p <= 1:
        raise ContractError(f"keep-probability p={p} outside (0, 1]")
    while True:
        mask = (rng.random(d) < p).astype(np.float64)
        if mask.any():
            return mask


def straight_through_sign(x) -> Tensor:
    """sign(x) forward (sign(0) = 0), derivative of tanh backward."""
    return ad.custom_grad(np.sign, lambda v: 1.0 - np.tanh(v) ** 2, x)


def binary_threshold(m_t, epsilon: float = 1.0) -> Tensor:
    """1 where |m_t| > epsilon else 0, with the tanh proxy gradient.

    The forward value is computed directly as a step so it is exactly 0/1;
    |m_t| == epsilon (where sign gives 0 and the half-sum gives 1/2) maps to 0.
    The backward pass is that of 1/2 * tanh(|m_t| - epsilon) + 1/2.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    m_t = ad.as_tensor(m_t)

    def forward(v):
        return (np.abs(v) > epsilon).astype(np.float64)

    def proxy_grad(v):
        return 0.5 * (1.0 - np.tanh(np.abs(v) - epsilon) ** 2) * np.sign(v)

    return ad.custom_grad(forward, proxy_grad, m_t)


@dataclass
class MaskPair:
    """Per-DNNF masks: fixed stochastic ``m_s``, trainable ``m_t`` and blend ``alpha``.

    ``m_s``, ``m_t`` and ``alpha`` may be batched over DNNFs (shapes ``(n, d)``
    and ``(n,)``); all functions below operate row-wise.
    """

    m_s: np.ndarray
    m_t: Tensor
    alpha: Tensor
    beta: float = 1.0
    epsilon: float = 1.0

    def __post_init__(self):
        self.m_s = np.asarray(self.m_s, dtype=np.float64)
        if not np.all((self.m_s == 0) | (self.m_s == 1)):
            raise ContractError("m_s must be binary")
        if np.any(self.m_s.sum(axis=-1) < 1):
            raise ContractError("m_s selects no features")
        if self.m_t.shape != self.m_s.shape:
            raise ContractError(f"m_t {self.m_t.shape} and m_s {self.m_s.shape} differ in shape")

    @classmethod
    def init(
        cls,
        d: int,
        p: float,
        rng: np.random.Generator,
        beta: float = 1.0,
        epsilon: float = 1.0,
    ) -> "MaskPair":
        m_s = sample_stochastic_mask(d, p, rng)
        m_t = init_trainable_mask((d,), rng, epsilon)
        return cls(m_s, Tensor(m_t, requires_grad=True, name="m_t"),
                   Tensor(0.0, requires_grad=True, name="alpha"), beta, epsilon)

    @property
    def params(self) -> list[Tensor]:
        return [self.m_t, self.alpha]


def init_trainable_mask(shape, rng: np.random.Generator, epsilon: float = 1.0) -> np.ndarray:
    """Uniform in [eps + 0.2, eps + 0.7] so every feature starts selected."""
    lo, hi = MT_INIT_SLACK
    return rng.uniform(epsilon + lo, epsilon + hi, size=shape)


def regularizer(mask: MaskPair) -> Tensor:
    """(1 - sigmoid(alpha)) / 2 * R2 + sigmoid(alpha) * R1, per mask row.

    R2 = | ||m_t*m_s||_2^2 / ||m_s||_1 - beta*eps^2 |,
    R1 = | ||m_t*m_s||_1   / ||m_s||_1 - beta*eps   |.
    """
    count = mask.m_s.sum(axis=-1)
    m_ts = mask.m_t * mask.m_s
    r2 = ad.tabs(ad.tsum(ad.square(m_ts), axis=-1) / count - mask.beta * mask.epsilon**2)
    r1 = ad.tabs(ad.tsum(ad.tabs(m_ts), axis=-1) / count - mask.beta * mask.epsilon)
    s = ad.sigmoid(mask.alpha)
    return (1.0 - s) * 0.5 * r2 + s * r1


def effective_mask(mask: MaskPair) -> Tensor:
    """T(m_t) * m_s: the binary vector that scales the rows of W."""
    return binary_threshold(mask.m_t, mask.epsilon) * mask.m_s


def assign_groups(n: int, values) -> list:
    """Split ``n`` items into equal contiguous groups, one per value; leftovers
    go round-robin starting from the first value."""
    q, r = divmod(n, len(values))
    out = []
    for j, value in enumerate(values):
        out.extend([value] * (q + (1 if j < r else 0)))
    return out
