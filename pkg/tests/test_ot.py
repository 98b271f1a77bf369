import itertools

import numpy as np
import pytest

from remote_fusion.encoder import MultilevelFeatures
from remote_fusion.ot import (
    NumericalError,
    OtProblem,
    cosine_cost,
    enhance_multilevel,
    exact_ot_oracle,
    fuse,
    plan_entropy,
    sinkhorn,
    sinkhorn_batch,
    solve,
    transport_features,
    write_plan_csv,
)
from remote_fusion.tensor import Tensor, sigmoid


def test_cosine_cost_identical_orthogonal_antipodal():
    e = np.array([[1.0, 0.0]])
    assert cosine_cost(e, e)[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert cosine_cost(e, np.array([[0.0, 3.0]]))[0, 0] == pytest.approx(1.0)
    assert cosine_cost(e, -2 * e)[0, 0] == pytest.approx(2.0)


def test_cosine_cost_orientation_target_rows():
    mu = np.random.default_rng(0).normal(size=(5, 3))  # source, b=5
    nu = np.random.default_rng(1).normal(size=(2, 3))  # target, a=2
    C = cosine_cost(mu, nu)
    assert C.shape == (2, 5)
    i, j = 1, 3
    cos = nu[i] @ mu[j] / np.linalg.norm(nu[i]) / np.linalg.norm(mu[j])
    assert C[i, j] == pytest.approx(1 - cos)


def test_zero_norm_row_is_flagged_not_nan():
    mu = np.array([[0.0, 0.0], [1.0, 0.0]])
    nu = np.array([[1.0, 1.0]])
    C = cosine_cost(mu, nu)
    assert np.all(np.isfinite(C)) and C[0, 0] == pytest.approx(1.0)
    plan = sinkhorn(OtProblem(mu, nu))
    assert plan.zero_norm_rows == 1


def test_single_cell_plan():
    plan = solve(np.array([[0.37]]), 0.1)
    np.testing.assert_allclose(plan.plan, [[1.0]])


def test_constant_cost_gives_product_measure():
    plan = solve(np.full((2, 3), 0.4), 0.1)
    np.testing.assert_allclose(plan.plan, np.full((2, 3), 1 / 6), atol=1e-12)


def test_small_lambda_approaches_permutation_oracle():
    C = np.random.default_rng(11).random((5, 5))
    _, best = exact_ot_oracle(C)
    plan = solve(C, 1e-3, max_iter=1000)
    # convergence is slow this close to the LP; the cost is what must be close
    slack = plan.marginal_residual * C.max()
    assert best - slack <= plan.transport_cost <= 1.01 * best + 1e-4


def test_log_domain_used_below_threshold_and_matches_scaling():
    C = np.random.default_rng(2).random((4, 6))
    a = solve(C, 0.06, log_domain_below=0.05)
    b = solve(C, 0.06, log_domain_below=0.1)  # forces log-domain
    np.testing.assert_allclose(a.plan, b.plan, atol=1e-9)


def test_non_convergence_is_flagged():
    C = np.random.default_rng(3).random((6, 6))
    plan = solve(C, 0.01, max_iter=2)
    assert not plan.converged and plan.iterations == 2


def test_nan_cost_raises_numerical_error_naming_lambda():
    C = np.full((2, 2), np.nan)
    with pytest.raises(NumericalError, match="0.1"):
        solve(C, 0.1)


def test_problem_validation():
    with pytest.raises(ValueError):
        OtProblem(np.ones((2, 2)), np.ones((2, 2)), lam=0.0)
    with pytest.raises(ValueError):
        OtProblem(np.ones((2, 2)), np.ones((2, 2)), source_weights=[0.7, 0.7])


def test_exact_oracle_identity_favoring():
    C = 1.0 - np.eye(4)
    perm, cost = exact_ot_oracle(C)
    assert perm == (0, 1, 2, 3) and cost == 0.0


def test_exact_oracle_constant_cost():
    _, cost = exact_ot_oracle(np.full((3, 3), 0.25))
    assert cost == pytest.approx(0.25)


def test_exact_oracle_against_independent_enumeration():
    C = np.random.default_rng(4).random((4, 4))
    _, cost = exact_ot_oracle(C)
    brute = min(sum(C[i, p[i]] for i in range(4)) for p in itertools.permutations(range(4))) / 4
    assert cost == pytest.approx(brute)


def test_exact_oracle_refuses_large():
    with pytest.raises(ValueError):
        exact_ot_oracle(np.zeros((9, 9)))


def test_transport_single_row_is_identity():
    mu = Tensor([[1.0, -2.0, 3.0]])
    out = transport_features(np.array([[1.0]]), mu)
    np.testing.assert_allclose(out.data, mu.data)


def test_transport_uniform_plan_identical_rows():
    r = np.array([0.5, -1.0])
    out = transport_features(np.full((3, 4), 1 / 12), Tensor(np.tile(r, (4, 1))))
    np.testing.assert_allclose(out.data, np.tile(r, (3, 1)), rtol=1e-6)


def test_transport_matches_direct_arithmetic():
    rng = np.random.default_rng(6)
    plan = solve(rng.random((2, 4)), 0.1)
    mu = rng.normal(size=(4, 3))
    out = transport_features(plan, Tensor(mu)).data
    np.testing.assert_allclose(out, 2 * plan.plan @ mu, rtol=1e-5)


def test_transport_rows_in_convex_hull():
    rng = np.random.default_rng(7)
    plan = solve(rng.random((3, 5)), 0.2)
    weights = 3 * plan.plan
    assert np.all(weights >= 0)
    # row mass is exact up to the solver tolerance, scaled by a
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=3 * 1e-6)


def test_fuse_gate_limits_and_midpoint():
    o, t = Tensor([[2.0]]), Tensor([[4.0]])
    np.testing.assert_allclose(fuse(o, t, Tensor([60.0])).data, [[2.0]])
    np.testing.assert_allclose(fuse(o, t, Tensor([-60.0])).data, [[4.0]])
    np.testing.assert_allclose(fuse(o, t, Tensor([0.0])).data, [[3.0]])


def test_fuse_alpha_gradient(gradcheck):
    rng = np.random.default_rng(8)
    o, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    err = gradcheck(lambda a: (fuse(Tensor(o), Tensor(t), a) * Tensor(w)).sum(), rng.normal(size=4))
    assert err < 1e-3


def _layers(rng, L, rows, d, lead=()):
    return MultilevelFeatures([Tensor(rng.normal(size=lead + (rows, d))) for _ in range(L)], "vision")


def test_enhance_l2_single_solve():
    feats = _layers(np.random.default_rng(9), 2, 3, 4)
    out, plans = enhance_multilevel(feats, [Tensor(np.zeros(4))])
    assert list(plans) == [1]
    assert plans[1].plan.shape == (3, 3)
    assert out[0] is feats[0]


def test_enhance_closed_gate_is_identity():
    feats = _layers(np.random.default_rng(10), 4, 3, 4)
    out, _ = enhance_multilevel(feats, [Tensor(np.full(4, 60.0)) for _ in range(3)])
    for a, b in zip(out.layers, feats.layers):
        np.testing.assert_allclose(a.data, b.data, rtol=1e-6)


def test_enhance_matches_step_by_step_oracle(f64):
    rng = np.random.default_rng(12)
    raw = [rng.normal(size=(3, 4)) for _ in range(3)]
    alphas = [rng.normal(size=4) for _ in range(2)]
    out, _ = enhance_multilevel(
        MultilevelFeatures([Tensor(x) for x in raw], "text"), [Tensor(a) for a in alphas]
    )
    src = np.concatenate(raw[:2], axis=0)
    C = np.empty((3, 6))
    for i in range(3):
        for j in range(6):
            C[i, j] = 1 - raw[2][i] @ src[j] / np.linalg.norm(raw[2][i]) / np.linalg.norm(src[j])
    plan = solve(C, 0.1).plan
    moved = 3 * plan @ src
    alpha = 1 / (1 + np.exp(-alphas[1]))
    np.testing.assert_allclose(out[2].data, alpha * raw[2] + (1 - alpha) * moved, rtol=1e-9)


def test_enhance_batched_matches_per_instance():
    rng = np.random.default_rng(13)
    feats = _layers(rng, 3, 4, 5, lead=(2,))
    alphas = [Tensor(rng.normal(size=5)) for _ in range(2)]
    out, _ = enhance_multilevel(feats, alphas)
    for b in range(2):
        single = MultilevelFeatures([Tensor(t.data[b]) for t in feats.layers], "vision")
        ref, _ = enhance_multilevel(single, alphas)
        for l in range(3):
            np.testing.assert_allclose(out[l].data[b], ref[l].data, rtol=1e-5, atol=1e-6)


def test_enhance_cross_attention_variant_keeps_shapes():
    rng = np.random.default_rng(14)
    feats = _layers(rng, 3, 4, 5)
    ca = {k: Tensor(rng.normal(size=(5, 5))) for k in ("wq", "wk", "wh")}
    out, plans = enhance_multilevel(feats, [Tensor(np.zeros(5))] * 2, variant="cross_attention", ca_params=ca)
    assert plans == {}
    assert [t.shape for t in out.layers] == [t.shape for t in feats.layers]


def test_enhance_alpha_gradient_with_plan_constant(gradcheck):
    rng = np.random.default_rng(15)
    raw = [rng.normal(size=(3, 4)) for _ in range(3)]
    w = rng.normal(size=(3, 4))

    def build(a1, a2):
        out, _ = enhance_multilevel(MultilevelFeatures([Tensor(x) for x in raw], "text"), [a1, a2])
        return (out[2] * Tensor(w)).sum()

    assert gradcheck(build, rng.normal(size=4), rng.normal(size=4)) < 1e-3


def test_entropy_monotone_in_lambda():
    rng = np.random.default_rng(16)
    lams = [0.01, 0.05, 0.1, 0.5, 1.0]
    for _ in range(20):
        C = rng.random((4, 7))
        H = [solve(C, lam, max_iter=5000).entropy for lam in lams]
        assert all(h2 >= h1 - 1e-9 for h1, h2 in zip(H, H[1:]))


def test_batch_solver_matches_single_instances():
    rng = np.random.default_rng(17)
    C = rng.random((3, 4, 5))
    batch = sinkhorn_batch(C, 0.1)
    for i in range(3):
        # the batch keeps iterating until its slowest member converges
        np.testing.assert_allclose(batch.plan[i], solve(C[i], 0.1).plan, atol=1e-6)


def test_plan_entropy_of_uniform():
    assert plan_entropy(np.full((2, 2), 0.25)) == pytest.approx(np.log(4))


def test_plan_csv_dump(tmp_path):
    plan = solve(np.array([[0.0, 1.0], [1.0, 0.0]]), 0.5)
    path = tmp_path / "p.csv"
    write_plan_csv(path, plan)
    lines = path.read_text().splitlines()
    assert lines[0] == "row,col,plan,cost"
    assert len(lines) == 5
    r, c, p, cost = lines[2].split(",")
    assert (int(r), int(c)) == (0, 1)
    assert float(p) == plan.plan[0, 1] and float(cost) == 1.0


def test_sigmoid_keeps_alpha_in_open_interval():
    a = sigmoid(Tensor(np.linspace(-10, 10, 7))).data
    assert np.all((a > 0) & (a < 1))
