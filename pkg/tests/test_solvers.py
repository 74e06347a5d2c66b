import numpy as np
import pytest

from acimpc.solvers import (
    ConvexQp,
    Lcp,
    LcpStatus,
    brute_force_lcp,
    complementarity_residual,
    kkt_residual,
    solve_convex_qp,
    solve_lcp_lemke,
    solve_lcp_qp,
)
from oracles import is_p_matrix, lcp_enumeration, qp_bound_enumeration


def random_spd(rng, m, shift=0.1):
    G = rng.standard_normal((m, m))
    return G @ G.T + shift * np.eye(m)


def random_p_matrix(rng, m):
    # SPD plus a modest skew part stays a P-matrix most of the time; verify and retry
    for _ in range(100):
        F = random_spd(rng, m, shift=0.5)
        skew = rng.standard_normal((m, m))
        F = F + 0.3 * (skew - skew.T)
        if is_p_matrix(F):
            return F
    raise AssertionError("failed to sample a P-matrix")


# ---------------------------------------------------------------------------
# Lemke
# ---------------------------------------------------------------------------


def test_lemke_scalar_active():
    sol = solve_lcp_lemke(Lcp(q=np.array([-1.0]), F=np.array([[2.0]])))
    assert sol.status is LcpStatus.SOLVED
    np.testing.assert_allclose(sol.lam, [0.5], atol=1e-12)
    np.testing.assert_allclose(sol.y, [0.0], atol=1e-12)


def test_lemke_trivial_nonnegative_q():
    q = np.array([1.0, 2.0])
    F = np.array([[1.0, 0.5], [0.2, 1.0]])
    sol = solve_lcp_lemke(Lcp(q, F))
    assert sol.status is LcpStatus.SOLVED
    np.testing.assert_array_equal(sol.lam, np.zeros(2))
    np.testing.assert_array_equal(sol.y, q)


def test_lemke_identity_two_active():
    sol = solve_lcp_lemke(Lcp(np.array([-1.0, -2.0]), np.eye(2)))
    assert sol.status is LcpStatus.SOLVED
    np.testing.assert_allclose(sol.lam, [1.0, 2.0], atol=1e-12)


def test_lemke_ray_termination():
    # y = -1 for every lam >= 0: no solution exists, Lemke must hit a ray
    sol = solve_lcp_lemke(Lcp(np.array([-1.0]), np.array([[0.0]])))
    assert sol.status is LcpStatus.RAY_TERMINATION


def test_lemke_deterministic():
    rng = np.random.default_rng(0)
    F = random_spd(rng, 5)
    q = rng.standard_normal(5)
    a = solve_lcp_lemke(Lcp(q, F))
    b = solve_lcp_lemke(Lcp(q, F))
    np.testing.assert_array_equal(a.lam, b.lam)
    np.testing.assert_array_equal(a.y, b.y)


@pytest.mark.parametrize("m", [1, 2, 3, 4, 5, 6])
def test_lemke_matches_enumeration_spd(m):
    rng = np.random.default_rng(100 + m)
    for _ in range(60):
        F = random_spd(rng, m)
        q = rng.standard_normal(m) * 2.0
        sol = solve_lcp_lemke(Lcp(q, F))
        assert sol.status is LcpStatus.SOLVED
        assert sol.comp_residual <= 1e-8
        cands = lcp_enumeration(q, F)
        assert len(cands) >= 1
        best = min(np.linalg.norm(sol.lam - c) for c in cands)
        assert best <= 1e-7


@pytest.mark.parametrize("m", [2, 3, 4, 5, 6])
def test_lemke_matches_enumeration_p_matrix(m):
    rng = np.random.default_rng(200 + m)
    for _ in range(40):
        F = random_p_matrix(rng, m)
        q = rng.standard_normal(m) * 2.0
        sol = solve_lcp_lemke(Lcp(q, F))
        assert sol.status is LcpStatus.SOLVED
        cands = lcp_enumeration(q, F)
        # P-matrix LCPs have exactly one solution
        assert len(cands) == 1
        np.testing.assert_allclose(sol.lam, cands[0], atol=1e-7)


def test_lemke_degenerate_tie():
    # identical rows create min-ratio ties; must still terminate deterministically
    q = np.array([-1.0, -1.0, -1.0])
    F = np.eye(3)
    sol = solve_lcp_lemke(Lcp(q, F))
    assert sol.status is LcpStatus.SOLVED
    np.testing.assert_allclose(sol.lam, np.ones(3), atol=1e-9)


# ---------------------------------------------------------------------------
# convex QP
# ---------------------------------------------------------------------------


def test_qp_unconstrained_matches_linear_solve():
    rng = np.random.default_rng(3)
    H = random_spd(rng, 4)
    g = rng.standard_normal(4)
    lower = np.full(4, -np.inf)
    res = solve_convex_qp(ConvexQp(H, g, lower), tol=1e-10)
    assert res.converged
    np.testing.assert_allclose(res.z, np.linalg.solve(H, -g), atol=1e-8)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_qp_matches_bound_enumeration(n):
    rng = np.random.default_rng(300 + n)
    for _ in range(40):
        H = random_spd(rng, n)
        g = rng.standard_normal(n) * 2.0
        lower = np.where(rng.random(n) < 0.7, 0.0, -np.inf)
        qp = ConvexQp(H, g, lower)
        res = solve_convex_qp(qp, tol=1e-9)
        assert res.converged, "QP did not converge"
        expect = qp_bound_enumeration(H, g, lower)
        np.testing.assert_allclose(res.z, expect, atol=1e-7)
        assert kkt_residual(qp, res.z) <= 1e-9


def test_qp_rejects_asymmetric():
    with pytest.raises(ValueError):
        ConvexQp(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2), np.zeros(2))


def test_qp_rejects_indefinite():
    H = np.diag([1.0, -1.0])
    with pytest.raises(ValueError):
        solve_convex_qp(ConvexQp(H, np.zeros(2), np.zeros(2)))


def test_qp_warm_start_accepts_initial_point():
    rng = np.random.default_rng(7)
    H = random_spd(rng, 3)
    g = rng.standard_normal(3)
    qp = ConvexQp(H, g, np.zeros(3))
    cold = solve_convex_qp(qp, tol=1e-10)
    warm = solve_convex_qp(qp, tol=1e-10, x0=cold.z)
    np.testing.assert_allclose(warm.z, cold.z, atol=1e-9)
    assert warm.iterations <= cold.iterations


def test_qp_stiff_scaling():
    # badly scaled Hessian, the polish must still reach tight KKT residuals
    rng = np.random.default_rng(11)
    base = random_spd(rng, 4)
    scale = np.diag([1.0, 1e2, 1e4, 1e6])
    H = scale @ base @ scale
    g = rng.standard_normal(4) * 1e3
    qp = ConvexQp(H, g, np.zeros(4))
    res = solve_convex_qp(qp, tol=1e-6)
    assert res.converged
    expect = qp_bound_enumeration(H, g, np.zeros(4))
    np.testing.assert_allclose(res.z, expect, atol=1e-8)


# ---------------------------------------------------------------------------
# QP route for LCP
# ---------------------------------------------------------------------------


def test_lcp_qp_matches_lemke_spd():
    rng = np.random.default_rng(17)
    for m in range(1, 7):
        for _ in range(30):
            F = random_spd(rng, m)
            q = rng.standard_normal(m) * 2.0
            p = Lcp(q, F)
            a = solve_lcp_qp(p)
            b = solve_lcp_lemke(p)
            assert a.status is LcpStatus.SOLVED
            np.testing.assert_allclose(a.lam, b.lam, atol=1e-7)
            assert a.comp_residual <= 1e-8


def test_lcp_qp_rejects_asymmetric():
    F = np.array([[1.0, 0.2], [0.0, 1.0]])
    with pytest.raises(ValueError):
        solve_lcp_qp(Lcp(np.array([-1.0, 1.0]), F))


def test_lcp_qp_rejects_indefinite():
    with pytest.raises(ValueError):
        solve_lcp_qp(Lcp(np.array([-1.0, 1.0]), np.diag([1.0, -2.0])))


# ---------------------------------------------------------------------------
# brute force oracle sanity
# ---------------------------------------------------------------------------


def test_brute_force_finds_multiple_solutions():
    # non-P matrix with several complementary solutions
    q = np.array([-1.0, -1.0])
    F = np.array([[1.0, 2.0], [2.0, 1.0]])
    sols = brute_force_lcp(Lcp(q, F))
    assert len(sols) >= 2
    for s in sols:
        assert s.comp_residual <= 1e-8


def test_brute_force_skips_singular_subsystems():
    q = np.array([1.0, -1.0])
    F = np.array([[0.0, 0.0], [0.0, 1.0]])
    sols = brute_force_lcp(Lcp(q, F))
    assert len(sols) >= 1
    for s in sols:
        assert complementarity_residual(s.lam, s.y) <= 1e-8


def test_lcp_validation():
    with pytest.raises(ValueError):
        Lcp(np.array([1.0, 2.0]), np.eye(3))
    with pytest.raises(ValueError):
        Lcp(np.array([np.nan]), np.eye(1))
