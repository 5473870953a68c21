"""Soft and exact OR/AND gates and the single DNNF block.

A DNNF is a trainable affine literal layer, a fixed layer of projected soft
ANDs (one per conjunction) and one soft OR over the conjunction outputs.
Literals are assigned to conjunctions in contiguous, disjoint blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

CONJ_LENGTHS = (2, 4, 6)


def soft_or(x) -> Tensor:
    """tanh(sum(x) + d - 1.5) over the last axis."""
    x = ad.as_tensor(x)
    d = x.shape[-1]
    if d < 1:
        raise ContractError("soft_or needs at least one input")
    return ad.tanh(ad.tsum(x, axis=-1) + (d - 1.5))


def soft_and(x) -> Tensor:
    """tanh(sum(x) - d + 1.5) over the last axis."""
    x = ad.as_tensor(x)
    d = x.shape[-1]
    if d < 1:
        raise ContractError("soft_and needs at least one input")
    return ad.tanh(ad.tsum(x, axis=-1) - (d - 1.5))


def soft_and_projected(x, u) -> Tensor:
    """tanh(u.x - ||u||_1 + 1.5) for a fixed binary indicator ``u``."""
    x = ad.as_tensor(x)
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != x.shape[-1]:
        raise DimensionError(f"soft_and_projected: x {x.shape} vs u {u.shape}")
    if not np.all((u == 0) | (u == 1)):
        raise ContractError("projection vector must be binary")
    weight = u.sum()
    if weight == 0:
        raise ContractError("empty conjunction: projection vector is all zeros")
    return ad.tanh(ad.tsum(x * u, axis=-1) - (weight - 1.5))


def hard_gate(kind: str, x) -> np.ndarray:
    """Exact binary gate on +-1 inputs: sign(sum(x) +- (d - 1)).

    Works on a single vector or a batch (last axis is the gate input).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x == 1) | (x == -1)):
        raise ContractError("hard_gate inputs must be +-1")
    d = x.shape[-1]
    if kind == "or":
        z = x.sum(axis=-1) + d - 1
    elif kind == "and":
        z = x.sum(axis=-1) - d + 1
    else:
        raise ContractError(f"unknown gate kind {kind!r}")
    return np.sign(z)


def build_conj_lengths(k: int) -> list[int]:
    """Conjunction lengths for a DNNF with ``k`` conjunctions.

    The conjunctions are split into thirds of length 2, 4 and 6; with
    ``k = 3q + r`` the ``r`` leftover conjunctions take the shortest lengths
    first.  ``k < 3`` falls back to all-length-2.
    """
    if k < 1:
        raise ContractError("k must be positive")
    if k < 3:
        return [2] * k
    q, r = divmod(k, 3)
    lengths: list[int] = []
    for j, length in enumerate(CONJ_LENGTHS):
        lengths.extend([length] * (q + (1 if j < r else 0)))
    return lengths


def build_conj_masks(k: int) -> list[np.ndarray]:
    """Binary indicator vectors c^1..c^k over the m literals of one DNNF."""
    lengths = build_conj_lengths(k)
    m = sum(lengths)
    masks = []
    start = 0
    for length in lengths:
        c = np.zeros(m)
        c[start : start + length] = 1.0
        masks.append(c)
        start += length
    return masks


@dataclass(frozen=True)
class DnnfSpec:
    k: int
    conj_lengths: tuple[int, ...]
    p: float = 1.0

    def __post_init__(self):
        if len(self.conj_lengths) != self.k or any(length < 1 for length in self.conj_lengths):
            raise ContractError(f"conj_lengths {self.conj_lengths} inconsistent with k={self.k}")
        if not 0 < self.p <= 1:
            raise ContractError(f"keep-probability p={self.p} outside (0, 1]")

    @classmethod
    def from_k(cls, k: int, p: float = 1.0) -> "DnnfSpec":
        return cls(k, tuple(build_conj_lengths(k)), p)

    @property
    def m(self) -> int:
        return sum(self.conj_lengths)

    @property
    def conj_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.conj_lengths)[:-1]]).astype(np.intp)

    def conj_matrix(self) -> np.ndarray:
        """Fixed m x k binary matrix whose column i is c^i."""
        out = np.zeros((self.m, self.k))
        for i, (start, length) in enumerate(zip(self.conj_offsets, self.conj_lengths)):
            out[start : start + length, i] = 1.0
        return out


@dataclass
class DnnfParams:
    W: Tensor
    b: Tensor
    conj_masks: np.ndarray = field(repr=False)

    @classmethod
    def init(cls, d: int, spec: DnnfSpec, rng: np.random.Generator) -> "DnnfParams":
        bound = np.sqrt(6.0 / (d + spec.m))
        W = Tensor(rng.uniform(-bound, bound, size=(d, spec.m)), requires_grad=True, name="W")
        b = Tensor(np.zeros(spec.m), requires_grad=True, name="b")
        return cls(W, b, spec.conj_matrix())


def literals(x, params: DnnfParams, effective_mask=None) -> Tensor:
    """tanh(x diag(mask) W + b); ``effective_mask=None`` means no masking."""
    x = ad.as_tensor(x)
    W = params.W
    if x.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"literals: x {x.shape} does not match W {W.shape}")
    if effective_mask is not None:
        mask = ad.as_tensor(effective_mask)
        if mask.shape != (W.shape[0],):
            raise DimensionError(f"literals: mask {mask.shape} does not match W {W.shape}")
        W = W * ad.reshape(mask, (-1, 1))
    return ad.tanh(x @ W + params.b)


def dnnf_forward(x, spec: DnnfSpec, params: DnnfParams, effective_mask=None) -> Tensor:
    """Soft DNF: literals -> k projected soft ANDs -> soft OR.  Returns shape (batch,)."""
    if params.conj_masks.shape != (spec.m, spec.k):
        raise DimensionError("conjunction masks do not match the DNNF spec")
    lit = literals(x, params, effective_mask)
    conj = ad.tanh(lit @ params.conj_masks - (params.conj_masks.sum(axis=0) - 1.5))
    return soft_or(conj)
