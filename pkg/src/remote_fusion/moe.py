"""Soft routing over cross-modal and unimodal experts.

Canonical expert order for ``L`` levels::

    [v2t_0 .. v2t_{L-1}, t2v_0 .. t2v_{L-1}, text_top, vision_top]

``v2t_j`` and ``text_top`` have text rows; ``t2v_j`` and ``vision_top`` have
vision rows. The router scores all ``2L + 2`` experts with one softmax; each
side of the mixture then uses its own subset of the weights, renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ConfigError
from .tensor import Tensor, ShapeError, concat, matmul, softmax, stack

MASKED = -1e30


def expert_tags(L: int) -> list[str]:
    return [f"v2t_{j}" for j in range(L)] + [f"t2v_{j}" for j in range(L)] + ["t", "v"]


def side_indices(L: int) -> tuple[list[int], list[int]]:
    """Indices of the text-row and vision-row experts in canonical order."""
    return list(range(L)) + [2 * L], list(range(L, 2 * L)) + [2 * L + 1]


def expert_mask(L: int, t2v=True, v2t=True, t=True, v=True) -> np.ndarray:
    keep = np.array([v2t] * L + [t2v] * L + [t, v], dtype=bool)
    text_idx, vis_idx = side_indices(L)
    if not keep[text_idx].any() or not keep[vis_idx].any():
        raise ConfigError("expert mask leaves one side of the mixture empty")
    return keep


@dataclass
class ExpertWeights:
    logits: Tensor  # [..., 2L+2]
    mask: np.ndarray  # [2L+2] bool, False = expert switched off

    @property
    def L(self) -> int:
        return (self.logits.shape[-1] - 2) // 2

    def _masked_logits(self, idx=None) -> Tensor:
        bias = np.where(self.mask, 0.0, MASKED).astype(self.logits.dtype)
        logits = self.logits + bias
        return logits if idx is None else logits[..., idx]

    @property
    def weights(self) -> Tensor:
        """Routing distribution over all experts (a simplex point per sample)."""
        return softmax(self._masked_logits(), axis=-1)

    def side(self, idx) -> Tensor:
        """Weights of the experts in ``idx`` renormalized to sum to 1."""
        return softmax(self._masked_logits(idx), axis=-1)


@dataclass
class MixedRepresentation:
    text_side: Tensor
    vision_side: Tensor


def _check_experts(experts, L: int | None = None):
    if L is None:
        if (len(experts) - 2) % 2 or len(experts) < 4:
            raise ConfigError(f"expected 2L+2 experts, got {len(experts)}")
        L = (len(experts) - 2) // 2
    tags = expert_tags(L)
    if len(experts) != len(tags):
        raise ConfigError(f"expected {len(tags)} experts for L={L}, got {len(experts)}")
    for (tag, _), want in zip(experts, tags):
        if tag != want:
            raise ConfigError(f"expert order mismatch: got {tag!r} where {want!r} belongs")
    return L


def route(experts, p_route: Tensor | None, mask: np.ndarray | None = None, uniform: bool = False) -> ExpertWeights:
    """Mean-pool each expert over rows, concatenate, project with ``p_route`` to one logit per expert.

    Experts switched off by ``mask`` contribute zeros to the pooled summary, so
    they cannot steer the routing either. ``uniform=True`` skips the projection
    (all logits zero).
    """
    L = _check_experts(experts)
    n = 2 * L + 2
    if mask is None:
        mask = np.ones(n, dtype=bool)
    first = experts[0][1]
    if uniform:
        logits = Tensor(np.zeros(first.shape[:-2] + (n,), dtype=first.dtype))
    else:
        parts = []
        for keep, (_, t) in zip(mask, experts):
            if keep:
                parts.append(t.mean(axis=-2))
            else:
                parts.append(Tensor(np.zeros(t.shape[:-2] + t.shape[-1:], dtype=t.dtype)))
        pooled = concat(parts, axis=-1)
        if p_route.shape != (pooled.shape[-1], n):
            raise ShapeError(f"routing matrix has shape {p_route.shape}, expected {(pooled.shape[-1], n)}")
        if pooled.ndim == 1:
            logits = matmul(pooled.reshape(1, -1), p_route).reshape(n)
        else:
            logits = matmul(pooled, p_route)
    return ExpertWeights(logits, np.asarray(mask, dtype=bool))


def _weighted_sum(tensors: list[Tensor], w: Tensor) -> Tensor:
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"cannot mix experts of shapes {shape} and {t.shape}")
    lead, (rows, d) = shape[:-2], shape[-2:]
    k = len(tensors)
    flat = stack([t.reshape(lead + (rows * d,)) for t in tensors], axis=-2)  # [..., k, rows*d]
    out = matmul(w.reshape(lead + (1, k)), flat)
    return out.reshape(shape)


def mix(experts, weights: ExpertWeights) -> MixedRepresentation:
    L = _check_experts(experts)
    text_idx, vis_idx = side_indices(L)
    tensors = [t for _, t in experts]
    text = _weighted_sum([tensors[i] for i in text_idx], weights.side(text_idx))
    vision = _weighted_sum([tensors[i] for i in vis_idx], weights.side(vis_idx))
    return MixedRepresentation(text, vision)
