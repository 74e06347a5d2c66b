"""Linear complementarity system stepping.

The discrete-time system is

    x_{k+1} = A x_k + B u_k + D lam_k + d
    0 <= lam_k  perp  E x_k + F lam_k + H u_k + c >= 0

A learned residual r shifts the complementarity offset: the constraint
becomes 0 <= lam perp E x + F lam + H u + (c + r) >= 0, so a residual is
exactly equivalent to replacing c by c + r.  lcs_step computes the offset as
(E x + H u) + (c + r) so that equivalence holds bitwise, which the tests rely
on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import yaml

from .solvers import Lcp, LcpStatus, solve_lcp_lemke, solve_lcp_qp


def _frozen_array(a, shape, name: str) -> np.ndarray:
    out = np.array(a, dtype=float)
    if out.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
    if not np.isfinite(out).all():
        raise ValueError(f"{name} contains non-finite entries")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class LcsParams:
    """Matrices (A, B, D, d, E, F, H, c) of a linear complementarity system."""

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    d: np.ndarray
    E: np.ndarray
    F: np.ndarray
    H: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        n_x = A.shape[0]
        B = np.asarray(self.B, dtype=float)
        n_u = B.shape[1] if B.ndim == 2 else 0
        c = np.asarray(self.c, dtype=float).reshape(-1)
        n_lam = c.shape[0]
        object.__setattr__(self, "A", _frozen_array(A, (n_x, n_x), "A"))
        object.__setattr__(self, "B", _frozen_array(B, (n_x, n_u), "B"))
        object.__setattr__(self, "D", _frozen_array(self.D, (n_x, n_lam), "D"))
        object.__setattr__(self, "d", _frozen_array(np.asarray(self.d).reshape(-1), (n_x,), "d"))
        object.__setattr__(self, "E", _frozen_array(self.E, (n_lam, n_x), "E"))
        object.__setattr__(self, "F", _frozen_array(self.F, (n_lam, n_lam), "F"))
        object.__setattr__(self, "H", _frozen_array(self.H, (n_lam, n_u), "H"))
        object.__setattr__(self, "c", _frozen_array(c, (n_lam,), "c"))
        spd = False
        if n_lam:
            sym_err = float(np.max(np.abs(self.F - self.F.T)))
            if sym_err <= 1e-9:
                spd = bool(np.linalg.eigvalsh(0.5 * (self.F + self.F.T))[0] > 1e-12)
        object.__setattr__(self, "_f_spd", spd)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_lam(self) -> int:
        return self.c.shape[0]

    @property
    def f_is_spd(self) -> bool:
        return self._f_spd  # type: ignore[attr-defined]

    def with_offset(self, shift: np.ndarray) -> "LcsParams":
        """Copy of the parameters with c replaced by c + shift."""
        return LcsParams(self.A, self.B, self.D, self.d, self.E, self.F, self.H, self.c + shift)


@dataclass(frozen=True)
class Residual:
    """Constant residual on the complementarity offset, one entry per contact row."""

    r: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float).reshape(-1)
        if not np.isfinite(r).all():
            raise ValueError("residual contains non-finite entries")
        r = r.copy()
        r.flags.writeable = False
        object.__setattr__(self, "r", r)

    @staticmethod
    def zeros(n_lam: int) -> "Residual":
        return Residual(np.zeros(n_lam))

    @property
    def n_lam(self) -> int:
        return self.r.shape[0]


@dataclass(frozen=True)
class LcsState:
    x: np.ndarray
    k: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1).copy()
        x.flags.writeable = False
        object.__setattr__(self, "x", x)


class LcsStepError(RuntimeError):
    """Contact solve failed; carries the state, input and offset vector."""

    def __init__(self, message: str, x: np.ndarray, u: np.ndarray, q_vec: np.ndarray, status):
        super().__init__(message)
        self.x = x
        self.u = u
        self.q_vec = q_vec
        self.status = status


def contact_offset(theta: LcsParams, x: np.ndarray, u: np.ndarray, r: Residual | None) -> np.ndarray:
    """Offset vector of the step LCP: (E x + H u) + (c + r)."""
    shift = theta.c if r is None else theta.c + r.r
    return (theta.E @ x + theta.H @ u) + shift


def lcs_step(
    state: LcsState, u: np.ndarray, theta: LcsParams, r: Residual | None = None
) -> tuple[LcsState, np.ndarray]:
    """One step of the (residual-shifted) complementarity system.

    Routes the contact LCP through the convex-QP solver when F is symmetric
    positive definite and through Lemke pivoting otherwise.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    x = state.x
    q_vec = contact_offset(theta, x, u, r)
    if theta.n_lam == 0:
        lam = np.zeros(0)
    else:
        prob = Lcp(q_vec, theta.F)
        sol = solve_lcp_qp(prob) if theta.f_is_spd else solve_lcp_lemke(prob)
        if sol.status is not LcpStatus.SOLVED or sol.comp_residual > 1e-7:
            raise LcsStepError(
                f"contact LCP failed with status {sol.status.value} "
                f"(residual {sol.comp_residual:.3e})",
                x, u, q_vec, sol.status,
            )
        lam = sol.lam
    x_next = (theta.A @ x + theta.B @ u) + theta.D @ lam + theta.d
    return LcsState(x_next, state.k + 1), lam


def rollout(
    x0: np.ndarray, inputs: np.ndarray, theta: LcsParams, r: Residual | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Simulate a whole input sequence; returns states (T+1, n_x) and forces (T, n_lam)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    T = inputs.shape[0]
    xs = np.zeros((T + 1, theta.n_x))
    lams = np.zeros((T, theta.n_lam))
    st = LcsState(x0, 0)
    xs[0] = st.x
    for k in range(T):
        st, lam = lcs_step(st, inputs[k], theta, r)
        xs[k + 1] = st.x
        lams[k] = lam
    return xs, lams


# ---------------------------------------------------------------------------
# structured-text serialization
# ---------------------------------------------------------------------------


def lcs_to_dict(theta: LcsParams) -> dict:
    return {
        "kind": "lcs_params",
        "n_x": theta.n_x,
        "n_u": theta.n_u,
        "n_lam": theta.n_lam,
        "A": theta.A.tolist(),
        "B": theta.B.tolist(),
        "D": theta.D.tolist(),
        "d": theta.d.tolist(),
        "E": theta.E.tolist(),
        "F": theta.F.tolist(),
        "H": theta.H.tolist(),
        "c": theta.c.tolist(),
    }


def lcs_from_dict(doc: dict) -> LcsParams:
    if doc.get("kind") != "lcs_params":
        raise ValueError(f"expected kind 'lcs_params', got {doc.get('kind')!r}")
    theta = LcsParams(
        A=np.array(doc["A"], dtype=float).reshape(doc["n_x"], doc["n_x"]),
        B=np.array(doc["B"], dtype=float).reshape(doc["n_x"], doc["n_u"]),
        D=np.array(doc["D"], dtype=float).reshape(doc["n_x"], doc["n_lam"]),
        d=np.array(doc["d"], dtype=float),
        E=np.array(doc["E"], dtype=float).reshape(doc["n_lam"], doc["n_x"]),
        F=np.array(doc["F"], dtype=float).reshape(doc["n_lam"], doc["n_lam"]),
        H=np.array(doc["H"], dtype=float).reshape(doc["n_lam"], doc["n_u"]),
        c=np.array(doc["c"], dtype=float),
    )
    return theta


def residual_to_dict(r: Residual) -> dict:
    return {"kind": "residual", "n_lam": r.n_lam, "r": r.r.tolist()}


def residual_from_dict(doc: dict) -> Residual:
    if doc.get("kind") != "residual":
        raise ValueError(f"expected kind 'residual', got {doc.get('kind')!r}")
    r = np.array(doc["r"], dtype=float)
    if r.shape != (doc["n_lam"],):
        raise ValueError("residual length does not match declared n_lam")
    return Residual(r)


def save_lcs(path, theta: LcsParams, r: Residual | None = None) -> None:
    docs = [lcs_to_dict(theta)]
    if r is not None:
        docs.append(residual_to_dict(r))
    with open(path, "w") as fh:
        yaml.safe_dump_all(docs, fh, sort_keys=False)


def load_lcs(path) -> tuple[LcsParams, Residual | None]:
    with open(path) as fh:
        docs = list(yaml.safe_load_all(fh))
    theta = lcs_from_dict(docs[0])
    r = residual_from_dict(docs[1]) if len(docs) > 1 else None
    return theta, r
