"""Online residual learning on the contact offset.

The learner maintains a window of observed transitions (x_k, u_k, x_{k+1}),
pairs each with a local linearization theta*_k, and measures how well the
residual-shifted system explains the data through an implicit loss: for each
point it solves

    l_eps = min_{lam >= 0, eta >= 0}  1/2 (D lam + z)' Q_d (D lam + z)
            + (1/eps) (lam' eta + (1/(2 gamma)) ||w + F lam - eta||^2)

with z = A x + B u + d - x_next (prediction defect if no contact force acts)
and w = E x + H u + c + r (contact offset seen by the model).  Under
0 < gamma < sigma_min(F + F') the inner problem is strictly convex, the loss
is differentiable in r, and by the envelope property its gradient needs only
the inner minimizers:

    dl/dr = (1/(eps gamma)) (w + F lam* - eta*).

One update = linearize the buffer, one gradient, one Adam step.

Numerics: the inner QP is solved in an eps-scaled form (same minimizers,
bounded conditioning even for eps as small as 1e-7), then eta is refined by
its closed-form conditional minimizer max(w + (F - gamma I) lam*, 0).  The
refinement makes the no-contact-agreement case exact: lam* = 0 gives
eta* = w bitwise, hence a gradient of exactly zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterator, Protocol

import numpy as np

from .lcs import LcsParams, Residual, contact_offset
from .models import RigidBodyModel, linearize
from .solvers import ConvexQp, solve_convex_qp


class GammaConditionError(ValueError):
    """gamma must sit strictly inside (0, sigma_min(F + F'))."""


@dataclass(frozen=True)
class DataPoint:
    """One observed transition; k is the absolute step index."""

    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    k: int

    def __post_init__(self):
        for name in ("x", "u", "x_next"):
            a = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if not np.isfinite(a).all():
                raise ValueError(f"{name} contains non-finite entries")
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if self.x.shape != self.x_next.shape:
            raise ValueError("x and x_next must have the same dimension")


@dataclass(frozen=True)
class Buffer:
    """Most-recent window of transitions, oldest evicted first.

    Immutable: push returns a new buffer, so concurrent readers always see a
    complete snapshot.
    """

    capacity: int
    window: tuple[DataPoint, ...] = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")
        if len(self.window) > self.capacity:
            raise ValueError("window exceeds capacity")
        ks = [pt.k for pt in self.window]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("step indices must be strictly increasing")

    def push(self, pt: DataPoint) -> "Buffer":
        if self.window and pt.k <= self.window[-1].k:
            raise ValueError(
                f"step index {pt.k} not after last retained index {self.window[-1].k}"
            )
        window = (self.window + (pt,))[-self.capacity:]
        return Buffer(self.capacity, window)

    @property
    def n_ct(self) -> int:
        """Step index of the oldest retained point (0 when empty)."""
        return self.window[0].k if self.window else 0

    def __len__(self) -> int:
        return len(self.window)

    def __iter__(self) -> Iterator[DataPoint]:
        return iter(self.window)


def push(buf: Buffer, pt: DataPoint) -> Buffer:
    return buf.push(pt)


class Linearizer(Protocol):
    def __call__(self, pt: DataPoint) -> LcsParams: ...


class ConstantLinearizer:
    """Always returns the same system; for plants that are already linear."""

    def __init__(self, theta: LcsParams):
        self.theta = theta
        self.calls = 0

    def __call__(self, pt: DataPoint) -> LcsParams:
        self.calls += 1
        return self.theta


class ModelLinearizer:
    """Linearizes a rigid-body model at each point, cached by step index."""

    def __init__(self, model: RigidBodyModel, cache_size: int = 64):
        self.model = model
        self.cache_size = cache_size
        self.linearize_calls = 0
        self._cache: dict[int, LcsParams] = {}

    def __call__(self, pt: DataPoint) -> LcsParams:
        theta = self._cache.get(pt.k)
        if theta is None:
            self.linearize_calls += 1
            theta = linearize(self.model, pt.x, pt.u)
            self._cache[pt.k] = theta
            while len(self._cache) > self.cache_size:
                self._cache.pop(next(iter(self._cache)))
        return theta


@dataclass(frozen=True)
class AugmentedBuffer:
    """Transitions paired with their local linearizations."""

    entries: tuple[tuple[DataPoint, LcsParams], ...]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.entries)


def augment(buf: Buffer, linearizer: Linearizer) -> AugmentedBuffer:
    """Pair every buffered point with theta*; failed entries are skipped so a
    single bad linearization cannot stall the online loop."""
    entries = []
    skipped = 0
    for pt in buf:
        try:
            entries.append((pt, linearizer(pt)))
        except Exception:
            skipped += 1
    return AugmentedBuffer(tuple(entries), skipped)


@dataclass(frozen=True)
class LearnConfig:
    eps: float
    gamma: float
    rate: float
    q_d: np.ndarray
    buffer_size: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    stab_eps: float = 1e-8

    def __post_init__(self):
        if not (self.eps > 0 and self.gamma > 0 and self.rate > 0):
            raise ValueError("eps, gamma and rate must be positive")
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be at least 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decay rates must lie in [0, 1)")
        q_d = np.asarray(self.q_d, dtype=float)
        if q_d.ndim != 2 or q_d.shape[0] != q_d.shape[1]:
            raise ValueError("q_d must be a square matrix")
        if np.max(np.abs(q_d - q_d.T)) > 1e-9:
            raise ValueError("q_d must be symmetric")
        if np.linalg.eigvalsh(0.5 * (q_d + q_d.T))[0] < -1e-9:
            raise ValueError("q_d must be positive semidefinite")
        q_d = 0.5 * (q_d + q_d.T)
        q_d.flags.writeable = False
        object.__setattr__(self, "q_d", q_d)


def velocity_weight_qd(n_q: int, n_v: int, weight: float) -> np.ndarray:
    """Prediction-error weight on velocity coordinates only."""
    q_d = np.zeros((n_q + n_v, n_q + n_v))
    q_d[n_q:, n_q:] = weight * np.eye(n_v)
    return q_d


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(n_lam: int) -> "OptimizerState":
        return OptimizerState(np.zeros(n_lam), np.zeros(n_lam), 0)


def _check_gamma(theta: LcsParams, gamma: float, entry: int) -> None:
    sym = theta.F + theta.F.T
    sigma_min = float(np.linalg.eigvalsh(sym)[0]) if theta.n_lam else np.inf
    if not (0.0 < gamma < sigma_min):
        raise GammaConditionError(
            f"entry {entry}: gamma={gamma} outside (0, sigma_min(F+F')={sigma_min})"
        )


def _inner_qp(
    theta: LcsParams, z: np.ndarray, w: np.ndarray, cfg: LearnConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Minimize the point loss over (lam, eta) >= 0.

    Solves the eps-scaled objective (identical minimizers) so the Hessian
    stays O(1/gamma) even for very small eps, then refines eta in closed
    form, which also pins the no-contact case to eta = w exactly.
    """
    n = theta.n_lam
    D, F = theta.D, theta.F
    eps, gamma = cfg.eps, cfg.gamma
    DQ = D.T @ cfg.q_d
    I_n = np.eye(n)
    H = np.empty((2 * n, 2 * n))
    H[:n, :n] = eps * (DQ @ D) + (F.T @ F) / gamma
    H[:n, n:] = I_n - F.T / gamma
    H[n:, :n] = I_n - F / gamma
    H[n:, n:] = I_n / gamma
    g = np.concatenate([eps * (DQ @ z) + F.T @ w / gamma, -w / gamma])
    psd_floor = float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])
    assert psd_floor >= -1e-9, f"inner Hessian not PSD (min eig {psd_floor})"
    res = solve_convex_qp(ConvexQp(H, g, np.zeros(2 * n)), tol=1e-8)
    if not res.converged:
        raise RuntimeError(f"inner QP did not converge (kkt {res.kkt_residual:.2e})")
    lam = res.z[:n]
    eta = np.maximum(w + (F - gamma * I_n) @ lam, 0.0)
    return lam, eta


def _point_value(
    theta: LcsParams, z: np.ndarray, w: np.ndarray, lam: np.ndarray, eta: np.ndarray,
    cfg: LearnConfig,
) -> float:
    defect = theta.D @ lam + z
    comp = w + theta.F @ lam - eta
    return float(
        0.5 * defect @ cfg.q_d @ defect
        + (lam @ eta + comp @ comp / (2.0 * cfg.gamma)) / cfg.eps
    )


def implicit_loss_point(
    pt: DataPoint, theta: LcsParams, r: Residual, cfg: LearnConfig, entry: int = 0
) -> tuple[float, np.ndarray, np.ndarray]:
    """Point loss with its inner minimizers (lam*, eta*)."""
    _check_gamma(theta, cfg.gamma, entry)
    z = (theta.A @ pt.x + theta.B @ pt.u) + theta.d - pt.x_next
    w = contact_offset(theta, pt.x, pt.u, r)
    lam, eta = _inner_qp(theta, z, w, cfg)
    return _point_value(theta, z, w, lam, eta, cfg), lam, eta


def implicit_loss_total(aug: AugmentedBuffer, r: Residual, cfg: LearnConfig) -> float:
    """Sum of point losses over the augmented buffer."""
    return sum(
        implicit_loss_point(pt, theta, r, cfg, entry=i)[0]
        for i, (pt, theta) in enumerate(aug.entries)
    )


def loss_and_gradient(
    aug: AugmentedBuffer, r: Residual, cfg: LearnConfig
) -> tuple[float, np.ndarray]:
    value = 0.0
    grad = np.zeros(r.n_lam)
    for i, (pt, theta) in enumerate(aug.entries):
        try:
            v_i, lam, eta = implicit_loss_point(pt, theta, r, cfg, entry=i)
        except GammaConditionError:
            raise
        except RuntimeError as exc:
            raise RuntimeError(f"entry {i}: {exc}") from exc
        value += v_i
        w = contact_offset(theta, pt.x, pt.u, r)
        grad += (w + theta.F @ lam - eta) / (cfg.eps * cfg.gamma)
    return value, grad


def loss_gradient(aug: AugmentedBuffer, r: Residual, cfg: LearnConfig) -> np.ndarray:
    """Envelope gradient of the summed loss in r."""
    return loss_and_gradient(aug, r, cfg)[1]


def adam_step(
    r: Residual, grad: np.ndarray, st: OptimizerState, cfg: LearnConfig
) -> tuple[Residual, OptimizerState]:
    """Bias-corrected adaptive-moment update with step size cfg.rate."""
    grad = np.asarray(grad, dtype=float).reshape(r.n_lam)
    t = st.t + 1
    m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    r_new = Residual(r.r - cfg.rate * m_hat / (np.sqrt(v_hat) + cfg.stab_eps))
    return r_new, OptimizerState(m, v, t)


@dataclass(frozen=True)
class AdaptInfo:
    loss: float = 0.0
    grad_norm: float = 0.0
    update_ms: float = 0.0
    skipped: int = 0
    no_op: bool = False


def adapt_update(
    buf: Buffer,
    r: Residual,
    st: OptimizerState,
    linearizer: Linearizer | RigidBodyModel,
    cfg: LearnConfig,
) -> tuple[Residual, OptimizerState, AdaptInfo]:
    """One learning iteration: augment, gradient, optimizer step."""
    t0 = time.perf_counter()
    if isinstance(linearizer, RigidBodyModel):
        linearizer = ModelLinearizer(linearizer)
    if len(buf) == 0:
        return r, st, AdaptInfo(no_op=True)
    aug = augment(buf, linearizer)
    if len(aug) == 0:
        return r, st, AdaptInfo(skipped=aug.skipped, no_op=True)
    value, grad = loss_and_gradient(aug, r, cfg)
    r_new, st_new = adam_step(r, grad, st, cfg)
    ms = (time.perf_counter() - t0) * 1e3
    info = AdaptInfo(
        loss=value,
        grad_norm=float(np.linalg.norm(grad)),
        update_ms=ms,
        skipped=aug.skipped,
    )
    return r_new, st_new, info
