"""Multilevel optimal-transport fusion.

Entropic OT between a stack of lower encoder layers (source) and one higher
layer (target), solved with Sinkhorn-Knopp scaling, followed by barycentric
transport of the source rows and a learnable per-dimension gate that blends
the transported features back into the target layer.

Orientation convention used throughout: plans and costs are ``a x b`` with
target rows (``a``) and source columns (``b``). Row sums of a plan match the
target weights, column sums match the source weights. The solver works in
float64 and hands plans back as constants; gradients never flow through it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .tensor import Tensor, ShapeError, concat, sigmoid

__all__ = [
    "NumericalError",
    "OtProblem",
    "TransportPlan",
    "PlanBatch",
    "cosine_cost",
    "sinkhorn",
    "sinkhorn_batch",
    "solve",
    "exact_ot_oracle",
    "transport_features",
    "fuse",
    "enhance_multilevel",
    "plan_entropy",
    "write_plan_csv",
]

ZERO_NORM_EPS = 1e-8


class NumericalError(ArithmeticError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def zero_norm_rows(x) -> np.ndarray:
    """Boolean mask of rows whose norm would be replaced by ``ZERO_NORM_EPS``."""
    return np.linalg.norm(_as_array(x), axis=-1) < ZERO_NORM_EPS


def cosine_cost(mu, nu) -> np.ndarray:
    """Cosine cost ``C[..., i, j] = 1 - cos(nu_i, mu_j)`` with target rows, source columns.

    ``mu`` is ``[..., b, d]`` (source), ``nu`` is ``[..., a, d]`` (target).
    Zero-norm rows get norm ``ZERO_NORM_EPS`` instead of dividing by zero.
    """
    mu, nu = _as_array(mu), _as_array(nu)
    if mu.shape[-1] != nu.shape[-1]:
        raise ShapeError(f"cosine_cost: feature widths differ, {mu.shape} vs {nu.shape}")
    mn = np.maximum(np.linalg.norm(mu, axis=-1), ZERO_NORM_EPS)
    nn = np.maximum(np.linalg.norm(nu, axis=-1), ZERO_NORM_EPS)
    sim = np.matmul(nu / nn[..., None], np.swapaxes(mu / mn[..., None], -1, -2))
    return np.clip(1.0 - sim, 0.0, 2.0)


def plan_entropy(plan: np.ndarray) -> np.ndarray:
    p = np.asarray(plan, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=(-2, -1))


def _uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


@dataclass
class OtProblem:
    """Source/target features plus marginal weights and entropy strength."""

    source: np.ndarray  # b x d
    target: np.ndarray  # a x d
    lam: float = 0.1
    source_weights: np.ndarray | None = None
    target_weights: np.ndarray | None = None

    def __post_init__(self):
        self.source = _as_array(self.source)
        self.target = _as_array(self.target)
        b, a = self.source.shape[0], self.target.shape[0]
        if self.source_weights is None:
            self.source_weights = _uniform(b)
        if self.target_weights is None:
            self.target_weights = _uniform(a)
        self.source_weights = np.asarray(self.source_weights, dtype=np.float64)
        self.target_weights = np.asarray(self.target_weights, dtype=np.float64)
        _check_weights(self.source_weights, b, "source")
        _check_weights(self.target_weights, a, "target")
        if not self.lam > 0:
            raise ValueError(f"entropy strength must be positive, got {self.lam}")

    @property
    def cost(self) -> np.ndarray:
        return cosine_cost(self.source, self.target)


def _check_weights(w: np.ndarray, n: int, name: str) -> None:
    if w.shape != (n,):
        raise ShapeError(f"{name} weights have shape {w.shape}, expected ({n},)")
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} weights must be positive and sum to 1")


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost: np.ndarray
    lam: float
    iterations: int
    marginal_residual: float
    converged: bool
    target_weights: np.ndarray
    source_weights: np.ndarray
    zero_norm_rows: int = 0

    @property
    def transport_cost(self) -> float:
        return float(np.sum(self.cost * self.plan))

    @property
    def entropy(self) -> float:
        return float(plan_entropy(self.plan))

    def summary(self) -> dict:
        return {
            "lambda": self.lam,
            "iterations": self.iterations,
            "residual": self.marginal_residual,
            "converged": self.converged,
            "transport_cost": self.transport_cost,
            "entropy": self.entropy,
            "zero_norm_rows": self.zero_norm_rows,
        }


@dataclass
class PlanBatch:
    """Sinkhorn results for a stack of independent problems sharing ``a`` and ``b``."""

    plan: np.ndarray  # [..., a, b]
    cost: np.ndarray
    lam: float
    iterations: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    zero_norm_rows: np.ndarray = field(default=None)

    def instance(self, idx) -> TransportPlan:
        p = self.plan[idx]
        a, b = p.shape
        return TransportPlan(
            plan=p,
            cost=self.cost[idx],
            lam=self.lam,
            iterations=int(self.iterations[idx]),
            marginal_residual=float(self.residual[idx]),
            converged=bool(self.converged[idx]),
            target_weights=_uniform(a),
            source_weights=_uniform(b),
            zero_norm_rows=0 if self.zero_norm_rows is None else int(self.zero_norm_rows[idx]),
        )

    def __len__(self):
        return int(np.prod(self.plan.shape[:-2]))


def _residual(plan, r, c):
    rows = np.abs(plan.sum(axis=-1) - r).sum(axis=-1)
    cols = np.abs(plan.sum(axis=-2) - c).sum(axis=-1)
    return np.maximum(rows, cols)


def sinkhorn_batch(
    cost,
    lam: float,
    target_weights=None,
    source_weights=None,
    max_iter: int = 200,
    tol: float = 1e-6,
    log_domain_below: float = 0.05,
) -> PlanBatch:
    """Entropic OT for every ``a x b`` cost matrix in ``cost[..., a, b]``.

    Scaling-vector iterations in float64, switching to log-domain potentials
    when ``lam < log_domain_below``. Iterates until every instance has marginal
    L1 residual below ``tol`` or ``max_iter`` is reached; instances that did
    not get there come back with ``converged=False``.
    """
    C = _as_array(cost)
    lead, (a, b) = C.shape[:-2], C.shape[-2:]
    C = C.reshape((-1, a, b))
    n = C.shape[0]
    r = _uniform(a) if target_weights is None else np.asarray(target_weights, dtype=np.float64)
    c = _uniform(b) if source_weights is None else np.asarray(source_weights, dtype=np.float64)
    if not lam > 0:
        raise ValueError(f"entropy strength must be positive, got {lam}")
    iters = np.full(n, max_iter, dtype=np.int64)
    done = np.zeros(n, dtype=bool)

    if lam < log_domain_below:
        log_r, log_c = np.log(r), np.log(c)
        f = np.zeros((n, a))
        g = np.zeros((n, b))
        for it in range(1, max_iter + 1):
            f = lam * (log_r - logsumexp((g[:, None, :] - C) / lam, axis=2))
            g = lam * (log_c - logsumexp((f[:, :, None] - C) / lam, axis=1))
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
                raise NumericalError(f"non-finite Sinkhorn potentials at lambda={lam}")
            log_rows = f / lam + logsumexp((g[:, None, :] - C) / lam, axis=2)
            res = np.abs(np.exp(log_rows) - r).sum(axis=1)
            newly = (~done) & (res < tol)
            iters[newly] = it
            done |= newly
            if done.all():
                break
        plan = np.exp((f[:, :, None] + g[:, None, :] - C) / lam)
    else:
        K = np.exp(-C / lam)
        v = np.ones((n, b))
        Kv = np.matmul(K, v[:, :, None])[:, :, 0]
        for it in range(1, max_iter + 1):
            u = r / Kv
            v = c / np.matmul(u[:, None, :], K)[:, 0, :]
            Kv = np.matmul(K, v[:, :, None])[:, :, 0]
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise NumericalError(f"non-finite Sinkhorn scaling at lambda={lam}")
            res = np.abs(u * Kv - r).sum(axis=1)
            newly = (~done) & (res < tol)
            iters[newly] = it
            done |= newly
            if done.all():
                break
        plan = u[:, :, None] * K * v[:, None, :]

    residual = _residual(plan, r, c)
    return PlanBatch(
        plan=plan.reshape(lead + (a, b)),
        cost=C.reshape(lead + (a, b)),
        lam=lam,
        iterations=iters.reshape(lead),
        residual=residual.reshape(lead),
        converged=(residual < tol).reshape(lead),
    )


def solve(cost, lam: float, target_weights=None, source_weights=None, **kw) -> TransportPlan:
    """Single-instance Sinkhorn on an explicit ``a x b`` cost matrix."""
    C = _as_array(cost)
    if C.ndim != 2:
        raise ShapeError(f"solve expects a 2-D cost matrix, got {C.shape}")
    a, b = C.shape
    r = _uniform(a) if target_weights is None else np.asarray(target_weights, dtype=np.float64)
    c = _uniform(b) if source_weights is None else np.asarray(source_weights, dtype=np.float64)
    batch = sinkhorn_batch(C, lam, r, c, **kw)
    return TransportPlan(
        plan=batch.plan,
        cost=C,
        lam=lam,
        iterations=int(batch.iterations),
        marginal_residual=float(batch.residual),
        converged=bool(batch.converged),
        target_weights=r,
        source_weights=c,
    )


def sinkhorn(problem: OtProblem, max_iter: int = 200, tol: float = 1e-6, log_domain_below: float = 0.05) -> TransportPlan:
    plan = solve(
        problem.cost,
        problem.lam,
        problem.target_weights,
        problem.source_weights,
        max_iter=max_iter,
        tol=tol,
        log_domain_below=log_domain_below,
    )
    plan.zero_norm_rows = int(zero_norm_rows(problem.source).sum() + zero_norm_rows(problem.target).sum())
    return plan


def exact_ot_oracle(cost) -> tuple[tuple[int, ...], float]:
    """Brute-force optimal assignment for uniform square OT (n <= 8).

    Returns the permutation ``sigma`` (row ``i`` goes to column ``sigma[i]``)
    and the optimal cost ``(1/n) * sum_i C[i, sigma[i]]``.
    """
    C = _as_array(cost)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError(f"exact_ot_oracle needs a square cost matrix, got {C.shape}")
    n = C.shape[0]
    if n > 8:
        raise ValueError(f"exact_ot_oracle refuses n={n} > 8 ({math.factorial(n)} permutations)")
    rows = np.arange(n)
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(n)):
        total = C[rows, perm].sum()
        if total < best:
            best, best_perm = total, perm
    return tuple(best_perm), float(best / n)


def transport_features(plan, mu: Tensor) -> Tensor:
    """Barycentric projection ``a * (plan @ mu)``; each output row is a convex mix of ``mu`` rows.

    The plan is treated as a constant.
    """
    p = plan.plan if isinstance(plan, (TransportPlan, PlanBatch)) else np.asarray(plan)
    if p.shape[-1] != mu.shape[-2]:
        raise ShapeError(f"plan columns ({p.shape}) do not match source rows ({mu.shape})")
    a = p.shape[-2]
    scaled = Tensor.__new__(Tensor)
    scaled.data = (a * p).astype(mu.dtype)
    scaled.grad, scaled.requires_grad, scaled._parents, scaled._backward, scaled.op = (
        None, False, (), None, "plan",
    )
    return scaled @ mu


def fuse(original: Tensor, transported: Tensor, alpha_raw: Tensor) -> Tensor:
    """``alpha * original + (1 - alpha) * transported`` with ``alpha = sigmoid(alpha_raw)``."""
    if original.shape != transported.shape:
        raise ShapeError(f"fuse: {original.shape} vs {transported.shape}")
    alpha = sigmoid(alpha_raw)
    return original * alpha + transported * (1.0 - alpha)


def enhance_multilevel(
    features,
    alphas,
    *,
    lam: float = 0.1,
    max_iter: int = 200,
    tol: float = 1e-6,
    log_domain_below: float = 0.05,
    variant: str = "optimal_transport",
    ca_params=None,
    frozen_plans: dict | None = None,
):
    """Enhance every layer ``l >= 1`` with features transported from raw layers ``0..l-1``.

    ``features`` is a :class:`MultilevelFeatures` whose layers may carry leading
    batch axes (``[..., rows, d]``). ``alphas[l-1]`` gates layer ``l``. With
    ``variant="cross_attention"`` the Sinkhorn step is replaced by attention
    with the target layer as queries and the source stack as keys/values.

    ``frozen_plans`` maps layer index to a plan array that is reused instead of
    solving again; it is how gradient checks hold the plans fixed.

    Returns ``(enhanced_features, plans)`` where ``plans`` maps layer index to
    a :class:`PlanBatch` (empty for the attention variant).
    """
    from .attention import cross_attend
    from .encoder import MultilevelFeatures

    layers = features.layers
    if len(layers) < 2:
        raise ValueError(f"enhance_multilevel needs at least 2 layers, got {len(layers)}")
    if len(alphas) != len(layers) - 1:
        raise ValueError(f"expected {len(layers) - 1} fusion gates, got {len(alphas)}")
    out = [layers[0]]
    plans: dict[int, PlanBatch] = {}
    for l in range(1, len(layers)):
        target = layers[l]
        source = layers[0] if l == 1 else concat(layers[:l], axis=-2)
        if variant == "optimal_transport":
            if frozen_plans is not None and l in frozen_plans:
                pb = frozen_plans[l]
            else:
                pb = sinkhorn_batch(
                    cosine_cost(source, target),
                    lam,
                    max_iter=max_iter,
                    tol=tol,
                    log_domain_below=log_domain_below,
                )
                zr = zero_norm_rows(source).sum(axis=-1) + zero_norm_rows(target).sum(axis=-1)
                pb.zero_norm_rows = zr
            plans[l] = pb
            moved = transport_features(pb, source)
        elif variant == "cross_attention":
            moved = cross_attend(target, source, ca_params)
        else:
            raise ValueError(f"unknown MOT variant {variant!r}")
        out.append(fuse(target, moved, alphas[l - 1]))
    return MultilevelFeatures(out, features.modality), plans


def write_plan_csv(path, plan: TransportPlan) -> None:
    """``row,col,plan,cost`` lines for every entry of the plan."""
    a, b = plan.plan.shape
    with open(path, "w") as fh:
        fh.write("row,col,plan,cost\n")
        for i in range(a):
            for j in range(b):
                fh.write(f"{i},{j},{float(plan.plan[i, j])!r},{float(plan.cost[i, j])!r}\n")
