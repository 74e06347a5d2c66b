"""Tests for the rigid-body models and their contact linearization."""

from __future__ import annotations

import numpy as np
import pytest

from acimpc.lcs import LcsState, lcs_step
from acimpc.models import (
    CartpoleWallsParams,
    PusherBallParams,
    RigidBodyModel,
    anitescu_step,
    cartpole_tip,
    cartpole_walls_lcs,
    contact_jacobian,
    edge_matrix,
    linearize,
    pusher_ball_plant,
)

RNG = np.random.default_rng(7)


def free_particle_2d(dt: float = 0.01) -> RigidBodyModel:
    m = 1.3
    return RigidBodyModel(
        n_q=2, n_v=2, n_u=2, n_c=0, n_e=0, dt=dt,
        mass_matrix=lambda q: m * np.eye(2),
        bias=lambda q, v: np.array([0.0, m * 9.81]),
        input_map=np.eye(2),
        phi=lambda q: np.zeros(0),
        jac_normal=lambda q: np.zeros((0, 2)),
        jac_tangent=lambda q: np.zeros((0, 2)),
        mu=np.zeros(0),
        name="free_particle",
    )


def ball_1d(eps_c: float = 0.0, mass: float = 1.4, dt: float = 0.01) -> RigidBodyModel:
    """Height-only ball over a rigid floor at zero, frictionless."""
    return RigidBodyModel(
        n_q=1, n_v=1, n_u=1, n_c=1, n_e=1, dt=dt,
        mass_matrix=lambda q: np.array([[mass]]),
        bias=lambda q, v: np.array([mass * 9.81]),
        input_map=np.zeros((1, 1)),
        phi=lambda q: q.copy(),
        jac_normal=lambda q: np.ones((1, 1)),
        jac_tangent=lambda q: np.zeros((1, 1)),
        mu=np.zeros(1),
        eps_c=eps_c,
        name="ball_1d",
    )


def block_2d(mu: float, eps_c: float = 0.0, mass: float = 1.0, dt: float = 0.01) -> RigidBodyModel:
    """Planar block on the ground, two friction edges along +-x."""
    return RigidBodyModel(
        n_q=2, n_v=2, n_u=2, n_c=1, n_e=2, dt=dt,
        mass_matrix=lambda q: mass * np.eye(2),
        bias=lambda q, v: np.array([0.0, mass * 9.81]),
        input_map=np.eye(2),
        phi=lambda q: q[1:2].copy(),
        jac_normal=lambda q: np.array([[0.0, 1.0]]),
        jac_tangent=lambda q: np.array([[1.0, 0.0], [-1.0, 0.0]]),
        mu=np.array([mu]),
        eps_c=eps_c,
        name="block_2d",
    )


def linear_plant(dt: float = 0.02) -> RigidBodyModel:
    """Globally linear dynamics with affine contact geometry; the
    linearization should reproduce the stepper everywhere, not just at the
    expansion point."""
    M = np.array([[2.0, 0.3], [0.3, 1.1]])
    G_q = np.array([[0.4, -0.2], [0.1, 0.5]])
    G_v = np.array([[0.3, 0.0], [-0.1, 0.2]])
    c0 = np.array([0.05, -0.02])
    P = np.array([[0.7, -0.4]])
    T = np.array([[0.2, 0.9], [-0.2, -0.9]])
    return RigidBodyModel(
        n_q=2, n_v=2, n_u=1, n_c=1, n_e=2, dt=dt,
        mass_matrix=lambda q: M,
        bias=lambda q, v: c0 + G_q @ q + G_v @ v,
        input_map=np.array([[1.0], [0.5]]),
        phi=lambda q: np.array([float(P[0] @ q) + 0.3]),
        jac_normal=lambda q: P,
        jac_tangent=lambda q: T,
        mu=np.array([0.4]),
        eps_c=1e-4,
        name="linear_plant",
    )


# -- stepping ---------------------------------------------------------------


def test_free_flight_is_symplectic_euler():
    model = free_particle_2d()
    q = np.array([0.1, 2.0])
    v = np.array([0.5, -0.3])
    u = np.array([0.7, 0.2])
    q_next, v_next, lam = anitescu_step(model, q, v, u)
    v_ref = v + model.dt * (u - np.array([0.0, 1.3 * 9.81])) / 1.3
    np.testing.assert_allclose(v_next, v_ref, rtol=0, atol=1e-14)
    np.testing.assert_allclose(q_next, q + model.dt * v_ref, rtol=0, atol=1e-14)
    assert lam.size == 0


def test_resting_ball_impulse_equals_m_g_dt():
    model = ball_1d(eps_c=0.0, mass=1.4)
    q_next, v_next, lam = anitescu_step(model, np.zeros(1), np.zeros(1), np.zeros(1))
    assert abs(lam[0] - 1.4 * 9.81 * model.dt) <= 1e-12
    np.testing.assert_allclose(v_next, 0.0, atol=1e-12)
    np.testing.assert_allclose(q_next, 0.0, atol=1e-14)


def test_resting_ball_impulse_with_regularization():
    m = 1.4
    model = ball_1d(eps_c=1e-3, mass=m)
    _, v_next, lam = anitescu_step(model, np.zeros(1), np.zeros(1), np.zeros(1))
    # active row: (1/m + eps) lam = g dt
    lam_ref = 9.81 * model.dt / (1.0 / m + 1e-3)
    assert abs(lam[0] - lam_ref) <= 1e-10
    assert abs(v_next[0] - (-9.81 * model.dt + lam_ref / m)) <= 1e-12


def test_sliding_block_closed_form():
    mu, m, dt, vx = 0.3, 1.0, 0.01, 1.0
    eps = 1e-4
    model = block_2d(mu, eps_c=eps, mass=m, dt=dt)
    q = np.array([0.0, 0.0])
    v = np.array([vx, 0.0])
    q_next, v_next, lam = anitescu_step(model, q, v, np.zeros(2))
    # only the edge opposing the slide is active; from row 2 of the LCP:
    # ((mu^2 + 1)/m + eps) lam2 = mu vx + g dt
    lam2 = (mu * vx + 9.81 * dt) / ((mu * mu + 1.0) / m + eps)
    np.testing.assert_allclose(lam, [0.0, lam2], rtol=0, atol=1e-10)
    assert abs(v_next[0] - (vx - mu * lam2 / m)) <= 1e-10
    # convex-model artifact: the sliding block acquires mu |v_t| upward drift
    assert abs(v_next[1] - (-9.81 * dt + lam2 / m)) <= 1e-10
    assert v_next[1] > 0


def test_penetration_is_pushed_out():
    model = ball_1d(eps_c=1e-4)
    q = np.array([-0.01])
    q_next, v_next, lam = anitescu_step(model, q, np.zeros(1), np.zeros(1))
    assert lam[0] > 0
    assert v_next[0] > 0
    # regularization relaxes the push-out by dt * eps_c * lam
    assert model.phi(q_next)[0] >= -model.dt * model.eps_c * lam[0] - 1e-12


def test_dropped_ball_total_energy_non_increasing():
    m = 1.4
    model = ball_1d(eps_c=0.0, mass=m)
    q, v = np.array([0.3]), np.array([0.0])
    energy = m * 9.81 * q[0]
    for _ in range(300):
        q, v, _ = anitescu_step(model, q, v, np.zeros(1))
        e_next = 0.5 * m * v[0] ** 2 + m * 9.81 * q[0]
        assert e_next <= energy + 1e-9
        energy = e_next
    assert abs(v[0]) <= 1e-6  # came to rest on the floor
    assert abs(q[0]) <= 1e-9


def test_pusher_kinetic_energy_non_increasing_without_input():
    p = PusherBallParams()
    model = pusher_ball_plant(p)
    mass = np.diag([p.finger_mass, p.finger_mass, p.ball_mass, p.ball_mass])
    # finger flying at the resting ball, no actuation afterwards
    q = np.array([-0.08, 0.004, 0.0, 0.0])
    v = np.array([0.8, 0.0, 0.0, 0.0])
    kinetic = 0.5 * v @ mass @ v
    hits = 0
    for _ in range(100):
        q, v, lam = anitescu_step(model, q, v, np.zeros(2))
        ke_next = 0.5 * v @ mass @ v
        assert ke_next <= kinetic + 1e-9
        kinetic = ke_next
        hits += int(lam.sum() > 1e-12)
    assert hits > 0  # the collision actually happened


def test_edge_matrix_structure():
    model = block_2d(0.5)
    np.testing.assert_array_equal(edge_matrix(model), [[1.0, 1.0]])
    plant = pusher_ball_plant(PusherBallParams())
    np.testing.assert_array_equal(edge_matrix(plant), [[1.0, 1.0, 1.0]])


def test_contact_jacobian_combines_normal_and_edges():
    mu = 0.37
    model = block_2d(mu)
    J_c = contact_jacobian(model, np.zeros(2))
    np.testing.assert_allclose(J_c, [[mu, 1.0], [-mu, 1.0]], atol=1e-15)
    model0 = block_2d(0.0)
    np.testing.assert_allclose(
        contact_jacobian(model0, np.zeros(2)), [[0.0, 1.0], [0.0, 1.0]], atol=1e-15
    )


# -- linearization ----------------------------------------------------------


def test_linearize_matches_step_at_expansion_point():
    model = linear_plant()
    # contact active: phi(q*) small and closing velocity
    x_star = np.array([-0.5, -0.2, 0.4, -0.3])
    u_star = np.array([0.25])
    assert model.phi(x_star[:2])[0] < 0.1
    theta = linearize(model, x_star, u_star)
    q_n, v_n, lam_n = anitescu_step(model, x_star[:2], x_star[2:], u_star)
    st, lam_l = lcs_step(LcsState(x_star), u_star, theta)
    np.testing.assert_allclose(st.x, np.concatenate([q_n, v_n]), rtol=0, atol=1e-9)
    np.testing.assert_allclose(lam_l, lam_n, rtol=0, atol=1e-9)


def test_linearize_exact_for_globally_linear_plant():
    model = linear_plant()
    theta = linearize(model, np.array([0.1, 0.0, 0.0, 0.0]), np.array([0.0]))
    for _ in range(20):
        x = RNG.uniform(-1.0, 1.0, size=4)
        u = RNG.uniform(-1.0, 1.0, size=1)
        q_n, v_n, lam_n = anitescu_step(model, x[:2], x[2:], u)
        st, lam_l = lcs_step(LcsState(x), u, theta)
        np.testing.assert_allclose(st.x, np.concatenate([q_n, v_n]), rtol=0, atol=1e-11)
        np.testing.assert_allclose(lam_l, lam_n, rtol=0, atol=1e-11)


def nonlinear_block(dt: float = 0.01) -> RigidBodyModel:
    """Strongly nonlinear smooth forces over a fixed contact frame, so the
    one-step linearization error comes from the dynamics alone."""
    m = 1.2

    def bias(q: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.array([
            2.0 * np.sin(3.0 * q[0]) + 0.8 * v[0] ** 3,
            m * 9.81 + 1.5 * np.cos(2.0 * q[0]) * v[1] + 0.5 * v[1] ** 3,
        ])

    return RigidBodyModel(
        n_q=2, n_v=2, n_u=2, n_c=1, n_e=2, dt=dt,
        mass_matrix=lambda q: m * np.eye(2),
        bias=bias,
        input_map=np.eye(2),
        phi=lambda q: q[1:2].copy(),
        jac_normal=lambda q: np.array([[0.0, 1.0]]),
        jac_tangent=lambda q: np.array([[1.0, 0.0], [-1.0, 0.0]]),
        mu=np.array([0.4]),
        eps_c=1e-4,
        name="nonlinear_block",
    )


def test_linearize_error_is_second_order():
    model = nonlinear_block()
    # sliding on the ground with the contact force active
    x_star = np.array([0.2, 0.0, 0.6, 0.0])
    u_star = np.array([0.3, -0.2])
    theta = linearize(model, x_star, u_star)
    direction = np.array([1.0, 0.0, -0.7, 0.0])
    direction /= np.linalg.norm(direction)

    def one_step_gap(delta: float) -> float:
        x = x_star + delta * direction
        q_n, v_n, lam_n = anitescu_step(model, x[:2], x[2:], u_star)
        assert lam_n.sum() > 1e-6  # contact stays engaged along the probe
        st, _ = lcs_step(LcsState(x), u_star, theta)
        return float(np.max(np.abs(st.x - np.concatenate([q_n, v_n]))))

    e1 = one_step_gap(2e-2)
    e2 = one_step_gap(1e-2)
    assert e1 > 1e-12  # probe actually sees the nonlinearity
    assert e1 / e2 >= 3.5


def test_linearize_first_order_consistency_on_pusher():
    # rotating contact frames are frozen at q*, so the one-step error decays
    # linearly (not quadratically) along directions that turn the normal
    p = PusherBallParams()
    model = pusher_ball_plant(p)
    x_star = np.array([-0.035, 0.0, 0.0, 0.0, 0.5, 0.3, 0.0, 0.0])
    u_star = np.array([0.4, 0.0])
    theta = linearize(model, x_star, u_star)

    def one_step_gap(delta: float) -> float:
        dx = np.zeros(8)
        dx[1] = delta
        x = x_star + dx
        q_n, v_n, _ = anitescu_step(model, x[:4], x[4:], u_star)
        st, _ = lcs_step(LcsState(x), u_star, theta)
        return float(np.max(np.abs(st.x - np.concatenate([q_n, v_n]))))

    e1 = one_step_gap(4e-3)
    e2 = one_step_gap(2e-3)
    assert e1 / e2 >= 1.8
    assert e1 <= 0.1  # still a small fraction of the state scale


def test_linearize_f_matrix_psd_then_pd_over_random_configurations():
    p = PusherBallParams()
    model = pusher_ball_plant(p)
    for _ in range(100):
        x = np.concatenate([RNG.uniform(-0.2, 0.2, size=4), RNG.uniform(-0.5, 0.5, size=4)])
        if np.linalg.norm(x[:2] - x[2:4]) < 0.01:
            x[0] += 0.05
        theta = linearize(model, x, RNG.uniform(-0.5, 0.5, size=2))
        np.testing.assert_allclose(theta.F, theta.F.T, atol=1e-12)
        eigs_pre = np.linalg.eigvalsh(theta.F - p.eps_c * np.eye(3))
        assert eigs_pre[0] >= -1e-9  # Jc M^-1 Jc' alone is PSD
        eigs_post = np.linalg.eigvalsh(theta.F + theta.F.T)
        # contact rows span 2 directions in the plane; the regularizer is the floor
        assert eigs_post[0] >= 2.0 * p.eps_c - 1e-12
        assert theta.f_is_spd


def test_anitescu_step_satisfies_its_optimality_conditions():
    p = PusherBallParams()
    model = pusher_ball_plant(p)
    mass = np.diag([p.finger_mass, p.finger_mass, p.ball_mass, p.ball_mass])
    for _ in range(30):
        q = RNG.uniform(-0.1, 0.1, size=4)
        v = RNG.uniform(-0.8, 0.8, size=4)
        u = RNG.uniform(-0.5, 0.5, size=2)
        q_next, v_next, lam = anitescu_step(model, q, v, u)
        # velocity update identity: M(v+ - v) = dt (B u - C) + Jc' lam
        J_c = contact_jacobian(model, q)
        tau = model.input_map @ u - np.array(
            [p.finger_drag * v[0], p.finger_drag * v[1], p.ball_drag * v[2], p.ball_drag * v[3]]
        )
        np.testing.assert_allclose(
            mass @ (v_next - v), model.dt * tau + J_c.T @ lam, rtol=0, atol=1e-9
        )
        np.testing.assert_allclose(q_next, q + model.dt * v_next, rtol=0, atol=1e-12)
        # complementarity residuals of the per-step LCP
        y = J_c @ v_next + edge_matrix(model).T @ model.phi(q) / model.dt + model.eps_c * lam
        assert np.min(lam) >= -1e-9
        assert np.min(y) >= -1e-9
        assert abs(lam @ y) <= 1e-8


def test_gap_rate_matches_normal_jacobian():
    model = pusher_ball_plant(PusherBallParams())
    h = 1e-6
    checked = 0
    while checked < 20:
        q = RNG.uniform(-0.3, 0.3, size=4)
        if np.linalg.norm(q[:2] - q[2:]) < 0.02:
            continue
        v = RNG.uniform(-1.0, 1.0, size=4)
        rate_fd = (model.phi(q + h * v)[0] - model.phi(q - h * v)[0]) / (2.0 * h)
        rate_jac = (model.jac_normal(q) @ v).item()
        if abs(rate_jac) < 1e-2:
            continue
        assert abs(rate_fd - rate_jac) / abs(rate_jac) <= 1e-4
        checked += 1


# -- cart-pole between walls ------------------------------------------------


def test_cartpole_matrices_match_hand_derivation():
    p = CartpoleWallsParams()
    theta, _ = cartpole_walls_lcs(p)
    dt, m_c, m_p, g, ell = p.dt, p.cart_mass, p.pole_mass, p.gravity, p.pole_length
    # linearized accelerations: xdd = (u - m_p g th)/m_c,
    # thdd = ((m_c + m_p) g th - u)/(m_c ell)
    assert abs(theta.A[2, 1] - dt * (-m_p * g / m_c)) <= 1e-12
    assert abs(theta.A[3, 1] - dt * ((m_c + m_p) * g / (m_c * ell))) <= 1e-12
    assert abs(theta.B[2, 0] - dt / m_c) <= 1e-12
    assert abs(theta.B[3, 0] - dt * (-1.0 / (m_c * ell))) <= 1e-12
    np.testing.assert_allclose(theta.F, np.eye(2) / p.stiffness, atol=1e-15)
    np.testing.assert_array_equal(theta.H, np.zeros((2, 1)))
    np.testing.assert_allclose(theta.E[:, :2], [[-1.0, ell], [1.0, -ell]], atol=1e-15)
    np.testing.assert_array_equal(theta.E[:, 2:], np.zeros((2, 2)))
    assert theta.f_is_spd


def test_cartpole_wall_force_signs():
    p = CartpoleWallsParams()
    theta, _ = cartpole_walls_lcs(p)
    x = np.array([0.4, 0.0, 0.0, 0.0])  # tip past the right wall
    assert cartpole_tip(x, p) > p.wall_offset
    st, lam = lcs_step(LcsState(x), np.zeros(1), theta)
    # spring force k * penetration on wall 1 only, pushing the cart back left
    np.testing.assert_allclose(lam, [p.stiffness * 0.05, 0.0], atol=1e-9)
    assert st.x[2] < 0.0

    x = np.array([-0.4, 0.0, 0.0, 0.0])
    st, lam = lcs_step(LcsState(x), np.zeros(1), theta)
    np.testing.assert_allclose(lam, [0.0, p.stiffness * 0.05], atol=1e-9)
    assert st.x[2] > 0.0


def test_cartpole_prior_offsets_walls_by_delta_phi():
    p = CartpoleWallsParams()
    theta_true, theta_prior = cartpole_walls_lcs(p)
    np.testing.assert_allclose(
        theta_prior.c, theta_true.c - np.asarray(p.delta_phi), rtol=0, atol=0
    )
    for name in ("A", "B", "D", "d", "E", "F", "H"):
        np.testing.assert_array_equal(getattr(theta_true, name), getattr(theta_prior, name))


def test_cartpole_free_region_is_unstable_upright():
    p = CartpoleWallsParams()
    theta, _ = cartpole_walls_lcs(p)
    x = np.array([0.0, 0.02, 0.0, 0.0])
    st, lam = lcs_step(LcsState(x), np.zeros(1), theta)
    assert np.all(lam == 0.0)
    assert st.x[3] > 0.0  # gravity grows the tilt


# -- pusher-ball ------------------------------------------------------------


def test_pusher_prior_underestimates_gap_by_radius_error():
    p = PusherBallParams()
    true_model = pusher_ball_plant(p)
    prior_model = pusher_ball_plant(p, radius=p.radius_prior)
    shift = p.radius_prior - p.radius_true
    for _ in range(10):
        q = RNG.uniform(-0.3, 0.3, size=4)
        gap_true = true_model.phi(q)[0]
        gap_prior = prior_model.phi(q)[0]
        assert abs((gap_true - gap_prior) - shift) <= 1e-15


def test_pusher_prior_offset_shift_in_linearization():
    p = PusherBallParams()
    true_model = pusher_ball_plant(p)
    prior_model = pusher_ball_plant(p, radius=p.radius_prior)
    x_star = np.array([-0.05, 0.005, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0])
    u_star = np.array([0.2, 0.0])
    th_true = linearize(true_model, x_star, u_star)
    th_prior = linearize(prior_model, x_star, u_star)
    shift = (p.radius_prior - p.radius_true) / p.dt
    np.testing.assert_allclose(th_prior.c, th_true.c - shift, rtol=0, atol=1e-10)
    for name in ("A", "B", "D", "d", "E", "F", "H"):
        np.testing.assert_allclose(
            getattr(th_true, name), getattr(th_prior, name), rtol=0, atol=1e-12
        )


def test_pusher_contact_rows_have_pure_normal_channel():
    p = PusherBallParams()
    model = pusher_ball_plant(p)
    q = np.array([-0.05, 0.0, 0.0, 0.0])
    J_c = contact_jacobian(model, q)
    J_n = model.jac_normal(q)
    np.testing.assert_allclose(J_c[0], J_n[0], atol=1e-15)
    # edge rows: normal +- mu * tangent
    np.testing.assert_allclose(J_c[1] + J_c[2], 2.0 * J_n[0], atol=1e-15)
    t_part = 0.5 * (J_c[1] - J_c[2])
    assert abs(float(J_n[0] @ t_part)) <= 1e-12  # orthogonal to the normal


def test_pusher_push_transfers_momentum():
    p = PusherBallParams()
    model = pusher_ball_plant(p)
    q = np.array([-p.radius_true - 0.001, 0.0, 0.0, 0.0])
    v = np.array([0.5, 0.0, 0.0, 0.0])
    for _ in range(10):
        q, v, lam = anitescu_step(model, q, v, np.array([0.5, 0.0]))
    assert v[2] > 0.05  # ball picked up speed along the push
    assert model.phi(q)[0] >= -5e-3  # no deep interpenetration


def test_model_dimension_helpers():
    p = PusherBallParams()
    model = pusher_ball_plant(p)
    assert model.n_x == 8
    assert model.n_lam == 3
    assert model.n_lam == model.n_c * model.n_e
