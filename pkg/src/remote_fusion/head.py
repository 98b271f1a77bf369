"""Pair representations, relation classifier, loss and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import ConfigError, DataError
from .moe import MixedRepresentation
from .tensor import ContractError, Tensor, concat, dropout, log_softmax, matmul


def _span_rows(span, mode: str) -> tuple[int, int]:
    s, e = span
    if e <= s:
        raise ContractError(f"empty span {span}")
    if mode == "marker":
        return s - 1, s
    return s, e


def entity_repr(mixed: MixedRepresentation, span, mode: str = "mean") -> Tensor:
    """Mean of ``text_side`` rows over the span interior (``mode="marker"``: the ``<s>`` row)."""
    lo, hi = _span_rows(span, mode)
    if hi > mixed.text_side.shape[-2]:
        raise ContractError(f"span {span} exceeds {mixed.text_side.shape[-2]} text rows")
    return mixed.text_side[lo:hi].mean(axis=0)


def object_repr(mixed: MixedRepresentation, caption_span, object_index: int, rows_per_object: int, mode: str = "mean") -> Tensor:
    """Caption pool from the text side concatenated with the object's vision-side row mean."""
    n_obj = mixed.vision_side.shape[-2] // rows_per_object
    if not 0 <= object_index < n_obj:
        raise ContractError(f"object {object_index} missing; {n_obj} objects present")
    lo, hi = _span_rows(caption_span, mode)
    cap = mixed.text_side[lo:hi].mean(axis=0)
    r0 = object_index * rows_per_object
    vis = mixed.vision_side[r0 : r0 + rows_per_object].mean(axis=0)
    return concat([cap, vis], axis=0)


def pad_entity(h: Tensor) -> Tensor:
    """Zero-pad a width-``d`` entity vector to the ``2d`` object width."""
    z = Tensor(np.zeros(h.shape, dtype=h.dtype))
    return concat([h, z], axis=-1)


def init_classifier(rng: np.random.Generator, d: int, hidden: int, n_rel: int) -> dict:
    fan_in = 4 * d
    return {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, n_rel)),
        "b2": np.zeros(n_rel),
    }


def classifier_logits(x: Tensor, params: dict, p_drop: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Two-layer tanh MLP on ``[..., 4d]`` pair inputs."""
    width = params["w1"].shape[0]
    if x.shape[-1] != width:
        raise ConfigError(f"classifier expects input width {width}, got {x.shape[-1]}")
    h = (matmul(x, params["w1"]) + params["b1"]).tanh()
    h = dropout(h, p_drop, rng, training)
    return matmul(h, params["w2"]) + params["b2"]


def classify(head: Tensor, tail: Tensor, params: dict, **kw):
    """Logits and argmax relation for one pair; entity vectors are zero-padded to ``2d``."""
    width = params["w1"].shape[0] // 2
    parts = []
    for h in (head, tail):
        if h.shape[-1] * 2 == width:
            h = pad_entity(h)
        elif h.shape[-1] != width:
            raise ConfigError(f"pair member width {h.shape[-1]} fits neither d={width // 2} nor 2d={width}")
        parts.append(h)
    logits = classifier_logits(concat(parts, axis=-1).reshape(1, -1), params, **kw).reshape(-1)
    return logits, predict(logits.data)


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax along the last axis; ties go to the lowest relation id."""
    return np.argmax(logits, axis=-1)


def loss(logits: Tensor, gold, sample_ids: Sequence[str] | None = None) -> Tensor:
    """Mean cross-entropy ``-log softmax(logits)[gold]`` over the leading axis (or a single pair)."""
    gold = np.atleast_1d(np.asarray(gold))
    n_rel = logits.shape[-1]
    bad = np.flatnonzero((gold < 0) | (gold >= n_rel))
    if bad.size:
        sid = sample_ids[bad[0]] if sample_ids is not None else "?"
        raise DataError(f"sample {sid}: gold relation {gold[bad[0]]} outside [0, {n_rel})")
    lp = log_softmax(logits.reshape(-1, n_rel), axis=-1)
    picked = lp[np.arange(len(gold)), gold]
    return -picked.mean()


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    n: int
    per_relation: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "n": self.n,
            "per_relation": self.per_relation,
        }


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def score(predictions, golds, relations: Sequence[str] | None = None) -> Metrics:
    """Accuracy over all pairs; micro (and macro) P/R/F1 with ``none`` (id 0) as the negative class."""
    pred = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(golds, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ContractError(f"{pred.size} predictions for {gold.size} gold labels")
    n_rel = len(relations) if relations is not None else int(max(pred.max(initial=0), gold.max(initial=0))) + 1
    names = list(relations) if relations is not None else [str(i) for i in range(n_rel)]
    acc = float((pred == gold).mean()) if pred.size else 0.0
    per, macro = {}, []
    TP = FP = FN = 0
    for r in range(n_rel):
        tp = int(np.sum((pred == r) & (gold == r)))
        fp = int(np.sum((pred == r) & (gold != r)))
        fn = int(np.sum((pred != r) & (gold == r)))
        per[names[r]] = {"tp": tp, "fp": fp, "fn": fn, "support": int(np.sum(gold == r))}
        if r == 0:
            continue
        TP, FP, FN = TP + tp, FP + fp, FN + fn
        if tp + fp + fn:
            macro.append(_prf(tp, fp, fn))
    p, rc, f = _prf(TP, FP, FN)
    mp, mr, mf = (float(np.mean([m[i] for m in macro])) for i in range(3)) if macro else (0.0, 0.0, 0.0)
    return Metrics(acc, p, rc, f, mp, mr, mf, int(pred.size), per)
