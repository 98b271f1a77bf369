"""Hierarchical bidirectional cross-modal attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .encoder import ConfigError, MultilevelFeatures
from .tensor import Tensor, ShapeError, matmul, softmax


def cross_attend(query_src: Tensor, kv_src: Tensor, params: dict, return_weights: bool = False):
    """Single-head attention: ``softmax(Q K^T / sqrt(d)) H`` with ``Q = query W_q``, ``K = kv W_k``, ``H = kv W_h``.

    ``params`` maps ``wq``, ``wk``, ``wh`` to ``d x d`` tensors. Inputs may have
    leading batch axes as long as they agree.
    """
    d = query_src.shape[-1]
    if kv_src.shape[-1] != d:
        raise ShapeError(f"cross_attend: query width {query_src.shape} vs key/value width {kv_src.shape}")
    q = matmul(query_src, params["wq"])
    k = matmul(kv_src, params["wk"])
    h = matmul(kv_src, params["wh"])
    attn = softmax(matmul(q, k.T) * (1.0 / math.sqrt(d)), axis=-1)
    out = matmul(attn, h)
    return (out, attn) if return_weights else out


@dataclass
class InteractionFeatures:
    """``v_to_t[j]``: text rows attending vision level ``j``; ``t_to_v[j]``: vision rows attending text level ``j``."""

    v_to_t: list
    t_to_v: list


def interact(text: MultilevelFeatures, vision: MultilevelFeatures, params_v2t: dict, params_t2v: dict) -> InteractionFeatures:
    """Top level of each modality queries every level of the other.

    Rows of ``v_to_t`` line up with text positions and rows of ``t_to_v`` with
    vision rows, so each can be mixed with the same-side unimodal feature.
    """
    if text.L != vision.L:
        raise ConfigError(f"text has {text.L} levels, vision has {vision.L}")
    if text.top.shape[-1] != vision.top.shape[-1]:
        raise ShapeError(f"text width {text.top.shape[-1]} != vision width {vision.top.shape[-1]}")
    v_to_t = [cross_attend(text.top, vision[j], params_v2t) for j in range(vision.L)]
    t_to_v = [cross_attend(vision.top, text[j], params_t2v) for j in range(text.L)]
    return InteractionFeatures(v_to_t, t_to_v)
