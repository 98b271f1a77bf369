"""Training loop (AdamW), evaluation and their file outputs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .config import RunConfig
from .encoder import DataError
from .head import Metrics, loss as ce_loss, predict, score
from .model import RemoteModel, bucket_key, collate
from .ot import NumericalError, write_plan_csv
from .tensor import no_grad

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["step", "epoch", "loss", "accuracy", "precision", "recall", "f1"]


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01, lr_scale: dict | None = None):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.lr_scale = lr_scale or {}  # parameter name -> multiplier on lr
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            lr = self.lr * self.lr_scale.get(k, 1.0)
            p.data = (p.data * (1.0 - lr * self.weight_decay) - lr * update).astype(p.dtype)


def split_records(records, eval_fraction: float = 0.2):
    """Deterministic split by a hash of ``sample_id``."""
    train, held = [], []
    for rec in records:
        h = int(hashlib.sha256(rec.sample_id.encode("utf-8")).hexdigest()[:8], 16) / 0xFFFFFFFF
        (held if h < eval_fraction else train).append(rec)
    return train, held


def make_batches(records, batch_size: int, rng: np.random.Generator | None = None):
    """Group records by shape signature, then chunk; shuffled when ``rng`` is given."""
    buckets = defaultdict(list)
    for rec in records:
        buckets[bucket_key(rec)].append(rec)
    batches = []
    for key in sorted(buckets):
        recs = buckets[key]
        if rng is not None:
            recs = [recs[i] for i in rng.permutation(len(recs))]
        batches.extend(recs[i : i + batch_size] for i in range(0, len(recs), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def balanced_pairs(gold: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """All related pairs plus an equal number of ``none`` pairs (all ``none`` pairs if there are no related ones)."""
    pos = np.flatnonzero(gold != 0)
    neg = np.flatnonzero(gold == 0)
    if len(pos) == 0:
        return neg
    take = min(len(pos), len(neg))
    chosen = rng.choice(neg, size=take, replace=False) if take else np.array([], dtype=np.int64)
    return np.sort(np.concatenate([pos, chosen]))


@dataclass
class EvalResult:
    metrics: Metrics
    predictions: list = field(default_factory=list)  # dicts for the prediction dump
    expert_rows: list = field(default_factory=list)
    plans: list = field(default_factory=list)  # (sample_id, modality, level, object, TransportPlan)


def evaluate(model: RemoteModel, records, batch_size: int | None = None, keep_plans: bool = False) -> EvalResult:
    """Score every candidate pair with dropout off."""
    c = model.config
    preds, golds, rows, expert_rows, plans = [], [], [], [], []
    with no_grad():
        for recs in make_batches(records, batch_size or c.batch_size):
            batch = collate(recs, c)
            if len(batch.pair_gold) == 0:
                continue
            out = model.forward(batch, training=False)
            logits = out.logits.data
            pred = predict(logits)
            preds.append(pred)
            golds.append(batch.pair_gold)
            w = out.expert_weights.weights.data
            for p, (sid, h, t) in enumerate(batch.pair_refs):
                g, pr = int(batch.pair_gold[p]), int(pred[p])
                rows.append({
                    "sample_id": sid, "head_ref": h, "tail_ref": t,
                    "gold": c.relations[g], "pred": c.relations[pr],
                    "logits": [float(v) for v in logits[p]],
                })
                expert_rows.append([sid, c.relations[g], c.relations[pr]] + [float(v) for v in w[batch.pair_sample[p]]])
            if keep_plans:
                K = batch.rgb.shape[1]
                for (mod, level), pb in out.plans.items():
                    for b, rec in enumerate(batch.records):
                        if mod == "text":
                            plans.append((rec.sample_id, mod, level, None, pb.instance(b)))
                        else:
                            for k in range(K):
                                plans.append((rec.sample_id, mod, level, k, pb.instance(b * K + k)))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    gold = np.concatenate(golds) if golds else np.zeros(0, dtype=np.int64)
    return EvalResult(score(pred, gold, c.relations), rows, expert_rows, plans)


@dataclass
class TrainResult:
    model: RemoteModel
    history: list


def _offending_group(model: RemoteModel) -> str:
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad))):
            return name.split(".", 1)[0]
    return "unknown"


def train(config: RunConfig, records, model: RemoteModel | None = None, progress=None) -> TrainResult:
    """Minibatch AdamW on balanced candidate pairs.

    One history row per pass over ``records``. Rows for completed passes hold
    running metrics over that pass's training batches (sampled pairs, dropout
    on); the row written after the final step holds eval-mode metrics on all of
    ``records``, so it matches a later ``evaluate`` call exactly.
    """
    model = model or RemoteModel(config)
    rng = np.random.default_rng(config.seed + 1)
    params = model.trainable()
    scales = {k: config.router_lr_scale for k in params if k.startswith("router.")}
    opt = AdamW(params, config.lr, (config.beta1, config.beta2), config.adam_eps, config.weight_decay, scales)
    history = []
    step, epoch = 0, 0
    losses, seen_pred, seen_gold = [], [], []
    while step < config.steps:
        epoch += 1
        for recs in make_batches(records, config.batch_size, rng):
            batch = collate(recs, config)
            keep = balanced_pairs(batch.pair_gold, rng)
            if len(keep) == 0:
                continue
            batch = batch.select_pairs(keep)
            model.zero_grad()
            out = model.forward(batch, training=True, rng=rng)
            loss = ce_loss(out.logits, batch.pair_gold, [r[0] for r in batch.pair_refs])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at step {step + 1}; offending group: {_offending_group(model)}")
            loss.backward()
            opt.step()
            step += 1
            losses.append(value)
            seen_pred.append(predict(out.logits.data))
            seen_gold.append(batch.pair_gold)
            if progress is not None:
                progress(step, value)
            if step >= config.steps:
                break
        if not seen_gold:
            raise DataError("training records yield no candidate pairs")
        if step >= config.steps:
            m = evaluate(model, records).metrics
        else:
            m = score(np.concatenate(seen_pred), np.concatenate(seen_gold), config.relations)
        row = _history_row(m, step, epoch, losses)
        history.append(row)
        log.info("step %d epoch %d loss %.4f acc %.4f f1 %.4f", step, epoch, row["loss"], row["accuracy"], row["f1"])
        losses, seen_pred, seen_gold = [], [], []
    return TrainResult(model, history)


def _history_row(m: Metrics, step, epoch, losses) -> dict:
    return {
        "step": step,
        "epoch": epoch,
        "loss": float(np.mean(losses)) if losses else float("nan"),
        "accuracy": m.accuracy,
        "precision": m.precision,
        "recall": m.recall,
        "f1": m.f1,
    }


# -- files --------------------------------------------------------------------


def save_model(path, model: RemoteModel) -> None:
    checkpoint.save(path, model.state_dict(), {"config": model.config.to_dict()})


def load_model(path) -> RemoteModel:
    state, meta = checkpoint.load(path)
    model = RemoteModel(RunConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_metrics(path, metrics: Metrics) -> None:
    with open(path, "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_predictions(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def write_expert_weights(path, rows, n_experts: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "relation_gold", "relation_pred"] + [f"w_{i}" for i in range(n_experts)])
        for row in rows:
            w.writerow(row[:3] + [repr(v) for v in row[3:]])


def write_plans(directory, plans) -> list[str]:
    """One ``.csv`` + ``.json`` sidecar per solved plan."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for sid, mod, level, obj, plan in plans:
        stem = f"{sid}_{mod}_l{level}" + ("" if obj is None else f"_o{obj}")
        base = os.path.join(directory, stem)
        write_plan_csv(base + ".csv", plan)
        with open(base + ".json", "w") as fh:
            json.dump(plan.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(base)
    return written
