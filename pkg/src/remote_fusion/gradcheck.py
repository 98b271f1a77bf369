"""Finite-difference check of every parameter group's analytic gradient.

Runs in float64 on a tiny batch. Sinkhorn plans are solved once and then held
fixed for every perturbed evaluation (plans are constants in the backward
pass, so the finite differences must see them as constants too), and dropout
masks are redrawn from the same seed each time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .encoder import FIRST_CONTENT, ConfigError
from .head import loss as ce_loss
from .model import RemoteModel, collate
from .synthetic import default_task_config, generate_synthetic
from .tensor import default_dtype, no_grad

EPS = 1e-4
TOLERANCE = 1e-3
NORM_FLOOR = 1e-7
MAX_CONTENT_TOKENS = 6


@dataclass
class GradCheckReport:
    errors: dict  # group -> max relative error over its tensors
    tolerance: float = TOLERANCE
    checked: dict = field(default_factory=dict)  # group -> number of entries compared

    @property
    def failed(self) -> list:
        return [g for g, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    def lines(self) -> list[str]:
        out = []
        for g, e in self.errors.items():
            status = "PASS" if e < self.tolerance else "FAIL"
            out.append(f"{g:<16} max_rel_err={e:.3e} entries={self.checked.get(g, 0)} {status}")
        out.append("PASS" if self.passed else "FAIL: " + ", ".join(self.failed))
        return out


def tiny_config(**changes) -> RunConfig:
    """d=8, L=2, one entity and one object, five content tokens, 4x4 images in 2x2 patches."""
    base = default_task_config(
        d=8,
        L=2,
        patch_size=2,
        batch_size=2,
        **{
            "synthetic.n_entities": 1,
            "synthetic.n_objects": 1,
            "synthetic.n_filler": 2,
            "synthetic.image_size": 4,
        },
    )
    return base.replace(**changes) if changes else base


def _check_tiny(config: RunConfig, records) -> None:
    if config.d > 8 or config.L != 2:
        raise ConfigError(f"grad check needs d <= 8 and L = 2, got d={config.d}, L={config.L}")
    for rec in records:
        n = sum(1 for t in rec.tokens if t >= FIRST_CONTENT)
        if n > MAX_CONTENT_TOKENS:
            raise ConfigError(f"sample {rec.sample_id} has {n} content tokens, grad check allows {MAX_CONTENT_TOKENS}")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = NORM_FLOOR) -> float:
    """``|a - n| / max(|a| + |n|, floor)`` with Euclidean norms."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return diff / max(scale, floor)


def grad_check(config: RunConfig | None = None, seed: int = 0, n_samples: int = 2, max_entries: int = 48) -> GradCheckReport:
    config = config or tiny_config()
    records = generate_synthetic(config, n_samples, seed)
    _check_tiny(config, records)
    with default_dtype(np.float64):
        model = RemoteModel(config, seed)
        batch = collate(records, config)
        with no_grad():
            frozen = model.forward(batch, training=False).plans

        def objective() -> "Tensor":  # noqa: F821
            rng = np.random.default_rng(seed + 17)
            out = model.forward(batch, training=True, rng=rng, frozen_plans=frozen)
            return ce_loss(out.logits, batch.pair_gold)

        model.zero_grad()
        objective().backward()
        analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in model.trainable().items()}

        pick = np.random.default_rng(seed + 29)
        errors: dict = {}
        counts: dict = {}
        with no_grad():
            for group, names in model.param_groups().items():
                worst, seen = 0.0, 0
                for name in names:
                    p = model.params[name]
                    flat = p.data.reshape(-1)
                    idx = np.arange(flat.size)
                    if flat.size > max_entries:
                        idx = np.sort(pick.choice(flat.size, size=max_entries, replace=False))
                    numeric = np.empty(len(idx))
                    for n, i in enumerate(idx):
                        keep = flat[i]
                        flat[i] = keep + EPS
                        up = float(objective().data)
                        flat[i] = keep - EPS
                        down = float(objective().data)
                        flat[i] = keep
                        numeric[n] = (up - down) / (2 * EPS)
                    worst = max(worst, relative_error(analytic[name].reshape(-1)[idx], numeric))
                    seen += len(idx)
                errors[group] = worst
                counts[group] = seen
    return GradCheckReport(errors, TOLERANCE, counts)
