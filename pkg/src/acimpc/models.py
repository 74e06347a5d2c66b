"""Rigid-body contact models, convex time stepping, and contact linearization.

Dynamics convention: M(q) dv/dt + C(q, v) = B u + J_c(q)' f, so the bias C
carries gravity, damping and velocity products.  Contact impulses lam >= 0
act along the rows of the edge Jacobian

    J_c = E_t' J_n + diag(mu) J_t,

one row per polyhedral friction edge, with E_t = blkdiag(1 ... 1) replicating
each contact's normal across its edges.  The per-step velocity problem is the
convex one: eliminating v_{k+1} from

    q_{k+1} = q_k + dt v_{k+1}
    v_{k+1} = v_k + M^-1 (dt B u - dt C + J_c' lam)
    0 <= lam  perp  E_t' phi(q_k)/dt + J_c v_{k+1} + eps_c lam >= 0

yields an LCP with the symmetric positive definite matrix
J_c M^-1 J_c' + eps_c I.  The same eps_c regularization appears in the
linearized system so that the linearization is exact at its expansion point.
This convex model trades a small normal-velocity bias during sliding
(bounded by mu |v_t|) for unconditional solvability.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lcs import LcsParams
from .solvers import Lcp, LcpStatus, solve_lcp_lemke, solve_lcp_qp

_FD_STEP = 1e-6


@dataclass(eq=False)
class RigidBodyModel:
    """Callable bundle describing one contact-rich mechanical system.

    n_e counts the Jacobian rows per contact; a row with a zero tangent acts
    as a pure normal force channel (used by the pusher-ball plant).
    """

    n_q: int
    n_v: int
    n_u: int
    n_c: int
    n_e: int
    dt: float
    mass_matrix: Callable[[np.ndarray], np.ndarray]
    bias: Callable[[np.ndarray, np.ndarray], np.ndarray]
    input_map: np.ndarray
    phi: Callable[[np.ndarray], np.ndarray]
    jac_normal: Callable[[np.ndarray], np.ndarray]
    jac_tangent: Callable[[np.ndarray], np.ndarray]
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eps_c: float = 1e-4
    name: str = "rigid_body"

    def __post_init__(self):
        self.input_map = np.asarray(self.input_map, dtype=float).reshape(self.n_v, self.n_u)
        self.mu = np.asarray(self.mu, dtype=float).reshape(self.n_c)

    @property
    def n_x(self) -> int:
        return self.n_q + self.n_v

    @property
    def n_lam(self) -> int:
        return self.n_c * self.n_e


def edge_matrix(model: RigidBodyModel) -> np.ndarray:
    """E_t, shape (n_c, n_lam): replicates each contact across its edge rows."""
    E_t = np.zeros((model.n_c, model.n_lam))
    for i in range(model.n_c):
        E_t[i, i * model.n_e:(i + 1) * model.n_e] = 1.0
    return E_t


def contact_jacobian(model: RigidBodyModel, q: np.ndarray) -> np.ndarray:
    """J_c = E_t' J_n + diag(mu per edge) J_t, shape (n_lam, n_v)."""
    if model.n_lam == 0:
        return np.zeros((0, model.n_v))
    J_n = np.asarray(model.jac_normal(q), dtype=float).reshape(model.n_c, model.n_v)
    J_t = np.asarray(model.jac_tangent(q), dtype=float).reshape(model.n_lam, model.n_v)
    mu_rows = np.repeat(model.mu, model.n_e)
    return edge_matrix(model).T @ J_n + mu_rows[:, None] * J_t


def anitescu_step(
    model: RigidBodyModel, q: np.ndarray, v: np.ndarray, u: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One convex contact step; returns (q_next, v_next, lam)."""
    q = np.asarray(q, dtype=float).reshape(model.n_q)
    v = np.asarray(v, dtype=float).reshape(model.n_v)
    u = np.asarray(u, dtype=float).reshape(model.n_u)
    M = np.asarray(model.mass_matrix(q), dtype=float).reshape(model.n_v, model.n_v)
    tau = model.input_map @ u - np.asarray(model.bias(q, v), dtype=float).reshape(model.n_v)
    v_free = v + model.dt * np.linalg.solve(M, tau)
    if model.n_lam == 0:
        v_next = v_free
        q_next = q + model.dt * v_next
        return q_next, v_next, np.zeros(0)
    J_c = contact_jacobian(model, q)
    Minv_Jt = np.linalg.solve(M, J_c.T)
    F = J_c @ Minv_Jt
    F = 0.5 * (F + F.T) + model.eps_c * np.eye(model.n_lam)
    gap = np.asarray(model.phi(q), dtype=float).reshape(model.n_c)
    q_vec = J_c @ v_free + edge_matrix(model).T @ gap / model.dt
    prob = Lcp(q_vec, F)
    sol = solve_lcp_qp(prob) if model.eps_c > 0.0 else solve_lcp_lemke(prob)
    if sol.status is not LcpStatus.SOLVED:
        raise RuntimeError(f"contact step failed: {sol.status.value}")
    lam = sol.lam
    v_next = v_free + Minv_Jt @ lam
    q_next = q + model.dt * v_next
    return q_next, v_next, lam


def _smooth_accel(model: RigidBodyModel, q, v, u) -> np.ndarray:
    M = np.asarray(model.mass_matrix(q), dtype=float).reshape(model.n_v, model.n_v)
    tau = model.input_map @ u - np.asarray(model.bias(q, v), dtype=float).reshape(model.n_v)
    return np.linalg.solve(M, tau)


def linearize(model: RigidBodyModel, x_star: np.ndarray, u_star: np.ndarray) -> LcsParams:
    """First-order system matrices around (x*, u*) with frozen contact geometry.

    The smooth acceleration is differentiated by central differences; the
    contact rows use phi, J_n, J_t evaluated at q* with q_{k+1} = q_k + dt
    v_{k+1} substituted, which reproduces the nonlinear step exactly at the
    expansion point.
    """
    x_star = np.asarray(x_star, dtype=float).reshape(model.n_x)
    u_star = np.asarray(u_star, dtype=float).reshape(model.n_u)
    n_q, n_v, n_u = model.n_q, model.n_v, model.n_u
    q_s, v_s = x_star[:n_q], x_star[n_q:]
    dt = model.dt

    xi = np.concatenate([q_s, v_s, u_star])

    def f_of(xi_vec: np.ndarray) -> np.ndarray:
        return _smooth_accel(model, xi_vec[:n_q], xi_vec[n_q:n_q + n_v], xi_vec[n_q + n_v:])

    J_f = np.zeros((n_v, n_q + n_v + n_u))
    for i in range(xi.size):
        e = np.zeros_like(xi)
        e[i] = _FD_STEP
        J_f[:, i] = (f_of(xi + e) - f_of(xi - e)) / (2.0 * _FD_STEP)
    d_v = dt * (f_of(xi) - J_f @ xi)

    J_q = J_f[:, :n_q]
    J_v = J_f[:, n_q:n_q + n_v]
    J_u = J_f[:, n_q + n_v:]

    I_q = np.eye(n_q)
    I_v = np.eye(n_v)
    A = np.block([
        [I_q + dt * dt * J_q, dt * (I_v + dt * J_v)],
        [dt * J_q, I_v + dt * J_v],
    ])
    B = np.vstack([dt * dt * J_u, dt * J_u])

    M = np.asarray(model.mass_matrix(q_s), dtype=float).reshape(n_v, n_v)
    J_c = contact_jacobian(model, q_s)
    n_lam = model.n_lam
    if n_lam == 0:
        D = np.zeros((model.n_x, 0))
        E = np.zeros((0, model.n_x))
        F = np.zeros((0, 0))
        H = np.zeros((0, n_u))
        c = np.zeros(0)
    else:
        D_v = np.linalg.solve(M, J_c.T)
        D = np.vstack([dt * D_v, D_v])
        E_t = edge_matrix(model)
        J_n = np.asarray(model.jac_normal(q_s), dtype=float).reshape(model.n_c, n_v)
        gap = np.asarray(model.phi(q_s), dtype=float).reshape(model.n_c)
        E = np.hstack([E_t.T @ J_n / dt + dt * (J_c @ J_q), J_c @ (I_v + dt * J_v)])
        F = J_c @ D_v
        F = 0.5 * (F + F.T) + model.eps_c * np.eye(n_lam)
        H = dt * (J_c @ J_u)
        c = E_t.T @ (gap - J_n @ q_s) / dt + J_c @ d_v
    d = np.concatenate([dt * d_v, d_v])
    return LcsParams(A, B, D, d, E, F, H, c)


# ---------------------------------------------------------------------------
# cart-pole between soft walls (directly a linear complementarity system)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CartpoleWallsParams:
    """Cart-pole whose pole tip runs between two spring walls.

    State [cart position, pole angle, cart velocity, angular velocity]; the
    tip coordinate is x - length * angle.  Wall 1 sits at +wall_offset and
    pushes the tip left; wall 2 sits at -wall_offset and pushes right.
    delta_phi is the injected model error: the prior system believes the wall
    offsets are wrong by -delta_phi, i.e. c_prior = c_true - delta_phi.
    """

    cart_mass: float = 0.978
    pole_mass: float = 0.35
    pole_length: float = 0.6
    wall_offset: float = 0.35
    stiffness: float = 100.0
    gravity: float = 9.81
    dt: float = 0.01
    delta_phi: tuple[float, float] = (-0.15, 0.15)


def cartpole_walls_lcs(p: CartpoleWallsParams) -> tuple[LcsParams, LcsParams]:
    """Build (theta_true, theta_prior); they differ only in the offset c."""
    m_c, m_p, length = p.cart_mass, p.pole_mass, p.pole_length
    dt = p.dt
    M = np.array([[m_c + m_p, m_p * length], [m_p * length, m_p * length**2]])
    # linearized torques about the upright: gravity acts through the angle only
    K_q = np.linalg.solve(M, np.array([[0.0, 0.0], [0.0, m_p * p.gravity * length]]))
    B_v = np.linalg.solve(M, np.array([[1.0], [0.0]]))
    # tip force map: wall 1 pushes -x at the tip (lever +length), wall 2 the reverse
    Q_map = np.array([[-1.0, 1.0], [length, -length]])
    D_v = np.linalg.solve(M, Q_map)

    I2 = np.eye(2)
    A = np.block([[I2 + dt * dt * K_q, dt * I2], [dt * K_q, I2]])
    B = np.vstack([dt * dt * B_v, dt * B_v])
    D = np.vstack([dt * dt * D_v, dt * D_v])
    d = np.zeros(4)
    # contact rows in gap units: y_i = lam_i / k + (distance from tip to wall i)
    E = np.array([
        [-1.0, length, 0.0, 0.0],
        [1.0, -length, 0.0, 0.0],
    ])
    F = np.diag([1.0 / p.stiffness, 1.0 / p.stiffness])
    H = np.zeros((2, 1))
    c_true = np.array([p.wall_offset, p.wall_offset])
    theta_true = LcsParams(A, B, D, d, E, F, H, c_true)
    theta_prior = theta_true.with_offset(-np.asarray(p.delta_phi, dtype=float))
    return theta_true, theta_prior


def cartpole_tip(x: np.ndarray, p: CartpoleWallsParams) -> float:
    """Horizontal pole-tip coordinate for state layout [pos, angle, vel, ang vel]."""
    return float(x[0] - p.pole_length * x[1])


# ---------------------------------------------------------------------------
# planar pusher-ball (finger pushes a ball across a table, top view)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PusherBallParams:
    """Actuated point finger and a ball on a table plane, both with 2 DoF.

    The finger-ball pair contributes one normal row plus n_e friction edge
    rows (n_lam = 1 + n_e); ball-table friction is folded into a viscous drag
    term so the mode count stays small.  radius_prior > radius_true models an
    overestimated ball radius: the prior gap reads radius_prior - radius_true
    smaller than the true gap, so the prior announces contact early.

    eps_c here is larger than the RigidBodyModel default: planar contact rows
    span only 2 directions, so sigma_min(F + F') = 2 eps_c, and the learner's
    stiffness parameter needs sigma_min > gamma with margin.
    """

    finger_mass: float = 0.2
    ball_mass: float = 0.1
    radius_true: float = 0.04
    radius_prior: float = 0.045
    mu: float = 0.3
    n_e: int = 2
    ball_drag: float = 2.0
    finger_drag: float = 1.0
    dt: float = 0.02
    eps_c: float = 1e-2


def pusher_ball_plant(p: PusherBallParams, radius: float | None = None) -> RigidBodyModel:
    """Build the plant; radius defaults to the true one (pass radius_prior for the prior)."""
    R = p.radius_true if radius is None else float(radius)
    mass = np.diag([p.finger_mass, p.finger_mass, p.ball_mass, p.ball_mass])
    drag = np.array([p.finger_drag, p.finger_drag, p.ball_drag, p.ball_drag])

    def _normal(q: np.ndarray) -> np.ndarray:
        delta = q[:2] - q[2:]
        dist = max(float(np.linalg.norm(delta)), 1e-9)
        return delta / dist

    def phi(q: np.ndarray) -> np.ndarray:
        return np.array([float(np.linalg.norm(q[:2] - q[2:])) - R])

    def jac_normal(q: np.ndarray) -> np.ndarray:
        n = _normal(q)
        return np.hstack([n, -n]).reshape(1, 4)

    def jac_tangent(q: np.ndarray) -> np.ndarray:
        n = _normal(q)
        t = np.array([-n[1], n[0]])
        row = np.hstack([t, -t])
        # first edge row is the pure normal channel (zero tangent component)
        return np.vstack([np.zeros(4), row, -row])

    return RigidBodyModel(
        n_q=4, n_v=4, n_u=2, n_c=1, n_e=1 + p.n_e, dt=p.dt,
        mass_matrix=lambda q: mass,
        bias=lambda q, v: drag * v,
        input_map=np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]),
        phi=phi,
        jac_normal=jac_normal,
        jac_tangent=jac_tangent,
        mu=np.array([p.mu]),
        eps_c=p.eps_c,
        name="pusher_ball",
    )
