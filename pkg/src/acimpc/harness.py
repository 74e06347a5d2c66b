"""Closed-loop experiment harness.

Wires a ground-truth plant to the adaptive MPC stack: the controller solves
the consensus MPC at the control rate against a prior model plus the latest
residual snapshot, the learner updates the residual from a window of observed
transitions at the adaptation rate, and everything is logged per period.

Two execution modes: deterministic interleaved single-threaded stepping for
tests (the learner runs every ceil(control_rate / adapt_rate)-th period), and
a free-running two-thread mode paced by the wall clock.  In both, the learner
publishes immutable versioned residual snapshots and the control loop reads
whole snapshots, so no period can observe a torn update.

The true plant parameters stay inside the experiment adapter; the controller
and learner only ever receive objects built from the prior parameters.
"""

from __future__ import annotations

import hashlib
import math
import threading
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np
import yaml

from .adapt import (
    AugmentedBuffer,
    Buffer,
    ConstantLinearizer,
    DataPoint,
    LearnConfig,
    ModelLinearizer,
    OptimizerState,
    adapt_update,
    loss_gradient,
    velocity_weight_qd,
)
from .c3 import C3Controller, MpcConfig, engaged_modes, lqr_terminal_cost, plan_to_target
from .lcs import LcsState, Residual, lcs_step
from .models import (
    CartpoleWallsParams,
    PusherBallParams,
    anitescu_step,
    cartpole_walls_lcs,
    linearize,
    pusher_ball_plant,
)


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class PusherTask:
    """Commanded ball path: a circle traversed at constant angular rate.

    The reference holds the start point for start_delay_s before moving, so an
    adaptive run has a stationary contact to learn from; finger_trail_frac < 1
    places the finger reference inside the believed contact distance, which
    keeps the planner pressing (and the learner fed) instead of hovering at the
    predicted surface.  lead_cap bounds how far the commanded ball position may
    lead the observed one: an uncapped error makes the short-horizon planner
    strike the ball instead of pushing it.  radial_gain > 1 weights the radial
    tracking error above the tangential one, so drift off the circle is
    corrected before more path progress is requested."""

    path_radius: float = 0.12
    angular_rate: float = 0.4
    center: tuple[float, float] = (0.0, 0.0)
    tube_tol: float = 0.05
    start_delay_s: float = 0.0
    finger_trail_frac: float = 1.0
    lead_cap: float = 0.03
    radial_gain: float = 1.0

    def reference(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Ball reference position and velocity at time t."""
        t_path = max(0.0, t - self.start_delay_s)
        ang = self.angular_rate * t_path
        c = np.asarray(self.center)
        pos = c + self.path_radius * np.array([np.cos(ang), np.sin(ang)])
        vel = self.path_radius * self.angular_rate * np.array([-np.sin(ang), np.cos(ang)])
        if t_path == 0.0:
            vel = np.zeros(2)
        return pos, vel


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    plant: CartpoleWallsParams | PusherBallParams
    learn: LearnConfig
    mpc: MpcConfig
    x0: np.ndarray
    duration_s: float
    control_rate_hz: float
    adapt_rate_hz: float
    noise_std: np.ndarray
    seed: int = 0
    adaptation: bool = True
    mode: str = "deterministic"
    out_dir: str | None = None
    task: PusherTask | None = None
    probe: tuple = ()

    def __post_init__(self):
        if self.experiment not in ("cartpole_walls", "pusher_ball"):
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.mode not in ("deterministic", "realtime"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not (self.control_rate_hz > 0 and self.adapt_rate_hz > 0):
            raise ConfigError("rates must be positive")
        if self.adapt_rate_hz > self.control_rate_hz + 1e-12:
            raise ConfigError("adaptation rate must not exceed the control rate")
        if self.duration_s <= 0:
            raise ConfigError("duration must be positive")
        n_x = 4 if self.experiment == "cartpole_walls" else 8
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (n_x,):
            raise ConfigError(f"x0 must have {n_x} entries")
        noise = np.broadcast_to(np.asarray(self.noise_std, dtype=float), (n_x,)).copy()
        if np.any(noise < 0):
            raise ConfigError("noise_std must be nonnegative")
        x0.flags.writeable = False
        noise.flags.writeable = False
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "noise_std", noise)
        if self.experiment == "pusher_ball" and self.task is None:
            object.__setattr__(self, "task", PusherTask())
        try:
            probe = tuple((float(d), float(c)) for d, c in self.probe)
        except (TypeError, ValueError):
            raise ConfigError("probe must be a list of [duration_s, cart_ref] pairs") from None
        if probe and self.experiment != "cartpole_walls":
            raise ConfigError("probe schedules are only available for cartpole_walls")
        if any(d <= 0 for d, _ in probe):
            raise ConfigError("probe segment durations must be positive")
        object.__setattr__(self, "probe", probe)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_s * self.control_rate_hz))

    @property
    def adapt_every(self) -> int:
        return max(1, math.ceil(self.control_rate_hz / self.adapt_rate_hz))


def _dataclass_from_doc(cls, doc: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    coerced = {}
    for key, value in doc.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where} section: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a plain dictionary."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    try:
        experiment = doc["experiment"]
    except KeyError:
        raise ConfigError("missing required key 'experiment'") from None
    if experiment == "cartpole_walls":
        plant = _dataclass_from_doc(CartpoleWallsParams, doc.get("plant", {}), "plant")
        n_q = n_v = 2
        n_lam, n_u = 2, 1
        theta_prior = cartpole_walls_lcs(plant)[1]
        prior_ab = (theta_prior.A, theta_prior.B)
        default_x0 = [0.1, 0.15, 0.3, -0.2]
        default_noise = 0.0
    elif experiment == "pusher_ball":
        plant = _dataclass_from_doc(PusherBallParams, doc.get("plant", {}), "plant")
        n_q = n_v = 4
        n_lam, n_u = 1 + plant.n_e, 2
        prior_ab = None
        default_x0 = [0.0, 0.0, 0.12, 0.0, 0.0, 0.0, 0.0, 0.0]
        # vision-like noise on the ball position coordinates only
        default_noise = [0.0, 0.0, 1e-3, 1e-3, 0.0, 0.0, 0.0, 0.0]
    else:
        raise ConfigError(f"unknown experiment {experiment!r}")

    learn_doc = dict(doc.get("learn", {}))
    qd_weight = learn_doc.pop("qd_velocity_weight", 1e6)
    if "q_d" in learn_doc:
        learn_doc["q_d"] = np.asarray(learn_doc["q_d"], dtype=float)
    else:
        learn_doc["q_d"] = velocity_weight_qd(n_q, n_v, float(qd_weight))
    try:
        learn = LearnConfig(**learn_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad learn section: {exc}") from exc

    mpc_doc = dict(doc.get("mpc", {}))
    n_x = n_q + n_v
    q = np.diag(np.broadcast_to(np.asarray(mpc_doc.pop("q_diag", 1.0), dtype=float), (n_x,)))
    r_in = np.diag(np.broadcast_to(np.asarray(mpc_doc.pop("r_diag", 1.0), dtype=float), (n_u,)))
    q_term_doc = mpc_doc.pop("q_terminal", "lqr")
    if isinstance(q_term_doc, str):
        if q_term_doc != "lqr":
            raise ConfigError(f"q_terminal must be 'lqr' or a diagonal, got {q_term_doc!r}")
        if prior_ab is None:
            raise ConfigError("q_terminal: lqr needs a stabilizable prior; give a diagonal")
        q_terminal = lqr_terminal_cost(prior_ab[0], prior_ab[1], q, r_in)
    else:
        q_terminal = np.diag(np.broadcast_to(np.asarray(q_term_doc, dtype=float), (n_x,)))
    try:
        mpc = MpcConfig(q=q, r_in=r_in, q_terminal=q_terminal, **mpc_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad mpc section: {exc}") from exc
    if n_lam > mpc.mode_cap:
        raise ConfigError(f"n_lam={n_lam} exceeds the mode enumeration cap {mpc.mode_cap}")

    task = None
    if "task" in doc:
        task = _dataclass_from_doc(PusherTask, doc["task"], "task")

    top = {
        "duration_s": float(doc.get("duration_s", 10.0)),
        "control_rate_hz": float(doc.get("control_rate_hz", 100.0)),
        "adapt_rate_hz": float(doc.get("adapt_rate_hz", 20.0)),
        "noise_std": doc.get("noise_std", default_noise),
        "seed": int(doc.get("seed", 0)),
        "adaptation": bool(doc.get("adaptation", True)),
        "mode": str(doc.get("mode", "deterministic")),
        "out_dir": doc.get("out_dir"),
        "x0": doc.get("x0", default_x0),
        "probe": doc.get("probe", ()),
    }
    known = {
        "experiment", "plant", "learn", "mpc", "task",
        "duration_s", "control_rate_hz", "adapt_rate_hz", "noise_std",
        "seed", "adaptation", "mode", "out_dir", "x0", "probe",
    }
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    # the plant advances by its own dt once per control period
    if abs(top["control_rate_hz"] * plant.dt - 1.0) > 1e-9:
        raise ConfigError(
            f"control_rate_hz={top['control_rate_hz']} does not match the plant "
            f"step 1/dt={1.0 / plant.dt:g}"
        )
    try:
        return ExperimentConfig(
            experiment=experiment, plant=plant, learn=learn, mpc=mpc, task=task, **top
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r") as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return config_from_dict(doc)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain-type echo of the configuration for the run summary."""

    def plain(obj):
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    def dc(obj, skip=()):
        return {f.name: plain(getattr(obj, f.name)) for f in fields(obj) if f.name not in skip}

    out = dc(cfg, skip=("plant", "learn", "mpc", "task"))
    out["plant"] = dc(cfg.plant)
    out["learn"] = dc(cfg.learn)
    out["mpc"] = dc(cfg.mpc)
    if cfg.task is not None:
        out["task"] = dc(cfg.task)
    return out


# ---------------------------------------------------------------------------
# experiment adapters
# ---------------------------------------------------------------------------


class _ProbeSchedule:
    """Piecewise cart-position reference that presses the pole tip against each
    believed wall long enough for contact data to accumulate in the buffer.
    Targets are approached with a linear ramp to avoid step-change transients;
    after the last segment the reference ramps back to the origin and the run
    falls through to plain regulation."""

    RAMP_S = 1.0

    def __init__(self, segments, dt: float):
        self.dt = dt
        self.spans = []  # (t_start, t_end, cart_from, cart_to)
        t, prev = 0.0, 0.0
        for dur, target in segments:
            self.spans.append((t, t + dur, prev, target))
            t, prev = t + dur, target
        self.t_end = t
        self.final = prev

    def _ramp(self, c_from: float, c_to: float, tau: float):
        if tau >= self.RAMP_S:
            return c_to, 0.0
        slope = (c_to - c_from) / self.RAMP_S
        return c_from + slope * tau, slope

    def x_ref(self, step: int):
        t = step * self.dt
        if t >= self.t_end:
            tau = t - self.t_end
            if tau >= self.RAMP_S:
                return None
            cart, rate = self._ramp(self.final, 0.0, tau)
        else:
            for t0, t1, c_from, c_to in self.spans:
                if t < t1:
                    cart, rate = self._ramp(c_from, c_to, t - t0)
                    break
        return np.array([cart, 0.0, rate, 0.0])


class _CartpoleExperiment:
    n_u = 1
    n_lam = 2

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        theta_true, theta_prior = cartpole_walls_lcs(cfg.plant)
        self.__theta_true = theta_true  # plant side only
        self.theta_prior = theta_prior
        self.learner_linearizer = ConstantLinearizer(theta_prior)
        self.n_x = 4
        self.residual_target = np.asarray(cfg.plant.delta_phi, dtype=float)
        self._probe = (
            _ProbeSchedule(cfg.probe, 1.0 / cfg.control_rate_hz) if cfg.probe else None
        )

    def plant_step(self, x, u):
        st, lam = lcs_step(LcsState(x), u, self.__theta_true)
        return st.x, lam

    def controller_theta(self, x_obs, u_prev):
        return self.theta_prior

    def x_ref(self, step, x_obs):
        return None if self._probe is None else self._probe.x_ref(step)

    def evaluate(self, xs_true, r_series) -> dict:
        norms = np.max(np.abs(xs_true), axis=1)
        stabilized = _sustained(norms < 0.05, 100)
        err = np.max(np.abs(r_series - self.residual_target), axis=1)
        converged = _sustained(err < 0.02, 100)
        return {
            "stabilized": bool(stabilized),
            "residual_converged": bool(converged),
            "success": bool(stabilized and converged),
            "final_state_norm": float(norms[-1]),
            "residual_target": self.residual_target.tolist(),
        }


class _PusherExperiment:
    n_u = 2

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.__model_true = pusher_ball_plant(cfg.plant)  # plant side only
        self.model_prior = pusher_ball_plant(cfg.plant, radius=cfg.plant.radius_prior)
        self.learner_linearizer = ModelLinearizer(
            self.model_prior, cache_size=4 * cfg.learn.buffer_size
        )
        self.n_x = 8
        self.n_lam = self.model_prior.n_lam
        self.task = cfg.task
        self._dt = 1.0 / cfg.control_rate_hz
        shift = (cfg.plant.radius_prior - cfg.plant.radius_true) / cfg.plant.dt
        self.residual_target = np.full(self.n_lam, shift)

    def plant_step(self, x, u):
        q, v = x[:4], x[4:]
        q_next, v_next, lam = anitescu_step(self.__model_true, q, v, u)
        return np.concatenate([q_next, v_next]), lam

    def controller_theta(self, x_obs, u_prev):
        return linearize(self.model_prior, x_obs, u_prev)

    def x_ref(self, step, x_obs):
        t = step * self._dt
        ball_ref, ball_vel = self.task.reference(t)
        ball_obs = x_obs[2:4]
        task = self.task
        center = np.asarray(task.center)
        rel = ball_obs - center
        rad_obs = np.linalg.norm(rel)
        th_ball = np.arctan2(rel[1], rel[0])
        th_ref = np.arctan2(ball_ref[1] - center[1], ball_ref[0] - center[0])
        # pure pursuit on the circle: the carrot sits on the path a bounded
        # angle ahead of the ball's own angle, never past the reference.
        # Chasing the reference point directly degenerates into an inward
        # chord once the reference is far ahead, and an uncapped lead makes
        # the short-horizon planner strike the ball instead of pushing it.
        d_th = (th_ref - th_ball + np.pi) % (2.0 * np.pi) - np.pi
        max_lead = task.lead_cap / task.path_radius
        th_c = th_ball + np.clip(d_th, -max_lead, max_lead)
        carrot = center + task.path_radius * np.array([np.cos(th_c), np.sin(th_c)])
        err = carrot - ball_obs
        # amplify the radius-correction component, keep the lead bound
        if rad_obs > 1e-9 and task.radial_gain != 1.0:
            e_r = rel / rad_obs
            err = err + (task.radial_gain - 1.0) * (err @ e_r) * e_r
        dist = np.linalg.norm(err)
        if dist > task.lead_cap:
            err = err * (task.lead_cap / dist)
        ball_cmd = ball_obs + err
        # press direction: the error term works the real ball back to the path;
        # the tangent term only fills in when the error is noise-sized (hold
        # phase), otherwise it would flatten the inward chord that keeps the
        # pushed ball on the curve
        tangent = np.sign(task.angular_rate) * np.array([-np.sin(th_c), np.cos(th_c)])
        aim = err + max(0.0, task.lead_cap - dist) * tangent
        aim = aim / np.linalg.norm(aim)
        trail = task.finger_trail_frac * self.cfg.plant.radius_prior
        finger_pos = ball_obs - trail * aim
        return np.concatenate([finger_pos, ball_cmd, ball_vel, ball_vel])

    def evaluate(self, xs_true, r_series) -> dict:
        swept = _swept_angle(xs_true[:, 2:4], self.task)
        quarter = bool(swept >= 0.5 * np.pi)
        target = self.residual_target[0]
        r_final = r_series[-1]
        within = bool(abs(r_final[0] - target) <= 0.2 * abs(target))
        return {
            "quarter_path": quarter,
            "success": quarter,
            "swept_angle_rad": float(swept),
            "required_angle_rad": float(0.5 * np.pi),
            "normal_row_residual": float(r_final[0]),
            "normal_row_within_20pct": within,
            "residual_target": float(target),
        }


def _sustained(flags: np.ndarray, count: int) -> bool:
    """True when `count` consecutive entries of flags hold somewhere."""
    run = 0
    for f in flags:
        run = run + 1 if f else 0
        if run >= count:
            return True
    return False


def _swept_angle(ball_xy: np.ndarray, task: PusherTask) -> float:
    """Path angle accumulated by the ball while inside the tube around the
    circle.  Only increments between consecutive on-path samples count, so an
    excursion that loops around the center off the path contributes nothing."""
    rel = ball_xy - np.asarray(task.center)
    radius = np.linalg.norm(rel, axis=1)
    on_path = np.abs(radius - task.path_radius) <= task.tube_tol
    ang = np.unwrap(np.arctan2(rel[:, 1], rel[:, 0]))
    inc = np.diff(ang) * np.sign(task.angular_rate)
    counted = np.where(on_path[1:] & on_path[:-1], inc, 0.0)
    prog = np.cumsum(counted)
    return float(max(np.max(prog, initial=0.0), 0.0))


def build_experiment(cfg: ExperimentConfig):
    if cfg.experiment == "cartpole_walls":
        return _CartpoleExperiment(cfg)
    return _PusherExperiment(cfg)


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualSnapshot:
    """Immutable published residual; checksum covers value and version."""

    version: int
    r: Residual
    checksum: str


def snapshot_checksum(version: int, r: Residual) -> str:
    digest = hashlib.md5(r.r.tobytes() + version.to_bytes(8, "little"))
    return digest.hexdigest()


def make_snapshot(version: int, r: Residual) -> ResidualSnapshot:
    return ResidualSnapshot(version, r, snapshot_checksum(version, r))


@dataclass
class RunResult:
    config: ExperimentConfig
    control_rows: list[dict]
    adapt_rows: list[dict]
    summary: dict
    xs_true: np.ndarray
    r_series: np.ndarray


def _control_row(
    step, sim_time, x, u, lam, x_d, lam_d, snap, loss, plan, timed
) -> dict:
    return {
        "step": step,
        "sim_time_s": sim_time,
        **{f"x{i}": float(v) for i, v in enumerate(x)},
        **{f"u{i}": float(v) for i, v in enumerate(u)},
        **{f"lam{i}": float(v) for i, v in enumerate(lam)},
        **{f"xd{i}": float(v) for i, v in enumerate(x_d)},
        **{f"lamd{i}": float(v) for i, v in enumerate(lam_d)},
        **{f"r{i}": float(v) for i, v in enumerate(snap.r.r)},
        "r_version": snap.version,
        "r_checksum": snap.checksum,
        "loss": loss,
        "solve_ms": plan.solve_ms if timed else 0.0,
        "admm_primal_res": plan.primal_residuals[-1] if plan.primal_residuals else 0.0,
        "admm_dual_res": plan.dual_residuals[-1] if plan.dual_residuals else 0.0,
        "engaged_modes": "|".join(str(m) for m in engaged_modes(plan.lams)),
        "fallback": int(plan.fallback),
    }


def _adapt_row(step, wall_time, info, r, timed) -> dict:
    return {
        "step": step,
        "wall_time_s": wall_time,
        "loss": float(info.loss),
        **{f"r{i}": float(v) for i, v in enumerate(r.r)},
        "grad_norm": float(info.grad_norm),
        "update_ms": info.update_ms if timed else 0.0,
    }


class _LoopState:
    """Shared mutable state of one closed-loop run; in realtime mode the
    learner thread owns (r, opt) and the control thread owns everything else,
    with the buffer and snapshot exchanged as immutable values."""

    def __init__(self, cfg: ExperimentConfig, exp):
        self.rng = np.random.default_rng(cfg.seed)
        self.x = cfg.x0.copy()
        self.buf = Buffer(capacity=cfg.learn.buffer_size)
        self.r = Residual.zeros(exp.n_lam)
        self.opt = OptimizerState.zeros(exp.n_lam)
        self.snapshot = make_snapshot(0, self.r)
        self.controller = C3Controller(cfg.mpc, exp.n_u)
        self.u_prev = np.zeros(exp.n_u)
        self.last_loss = 0.0
        self.lock = threading.Lock()
        self.stop = False
        self.control_rows: list[dict] = []
        self.adapt_rows: list[dict] = []
        self.xs_true = [self.x.copy()]
        self.r_series = [self.r.r.copy()]
        self.plan_target_failures = 0

    def observe(self, cfg, x):
        return x + self.rng.normal(size=x.shape) * cfg.noise_std


def _control_period(cfg, exp, ls: _LoopState, step: int, timed: bool, obs: np.ndarray):
    """One control period: solve, apply, step the plant, store the transition.
    Returns the next true state and its observation."""
    snap = ls.snapshot
    theta_t = exp.controller_theta(obs, ls.u_prev)
    plan = ls.controller.solve(obs, theta_t, snap.r, x_ref=exp.x_ref(step, obs))
    u = np.asarray(plan.u0, dtype=float)
    try:
        x_d, lam_d = plan_to_target(obs, u, theta_t, snap.r)
    except Exception:
        ls.plan_target_failures += 1
        x_d, lam_d = obs.copy(), np.zeros(exp.n_lam)
    x_next, lam = exp.plant_step(ls.x, u)
    obs_next = ls.observe(cfg, x_next)
    pt = DataPoint(obs, u, obs_next, k=step)
    with ls.lock:
        ls.buf = ls.buf.push(pt)
    sim_time = step / cfg.control_rate_hz
    ls.control_rows.append(
        _control_row(step, sim_time, ls.x, u, lam, x_d, lam_d, snap, ls.last_loss, plan, timed)
    )
    ls.x = x_next
    ls.u_prev = u
    ls.xs_true.append(x_next.copy())
    return obs_next


def _adapt_once(cfg, exp, ls: _LoopState, step: int, wall_time: float, timed: bool):
    with ls.lock:
        buf = ls.buf
    try:
        r_new, opt_new, info = adapt_update(buf, ls.r, ls.opt, exp.learner_linearizer, cfg.learn)
    except Exception:
        # learner failure skips one update but never aborts the run
        ls.adapt_rows.append(
            {
                "step": step,
                "wall_time_s": wall_time,
                "loss": float("nan"),
                **{f"r{i}": float(v) for i, v in enumerate(ls.r.r)},
                "grad_norm": float("nan"),
                "update_ms": 0.0,
            }
        )
        ls.r_series.append(ls.r.r.copy())
        return
    ls.r, ls.opt = r_new, opt_new
    if not info.no_op:
        ls.snapshot = make_snapshot(ls.snapshot.version + 1, ls.r)
        ls.last_loss = float(info.loss)
    ls.adapt_rows.append(_adapt_row(step, wall_time, info, ls.r, timed))
    ls.r_series.append(ls.r.r.copy())


def _run_deterministic(cfg: ExperimentConfig, exp, ls: _LoopState):
    obs = ls.observe(cfg, ls.x)
    for step in range(cfg.n_steps):
        obs = _control_period(cfg, exp, ls, step, timed=False, obs=obs)
        if cfg.adaptation and (step + 1) % cfg.adapt_every == 0:
            sim_time = (step + 1) / cfg.control_rate_hz
            _adapt_once(cfg, exp, ls, step, sim_time, timed=False)


def _run_realtime(cfg: ExperimentConfig, exp, ls: _LoopState):
    t_start = time.perf_counter()

    def control_loop():
        obs = ls.observe(cfg, ls.x)
        period = 1.0 / cfg.control_rate_hz
        next_t = time.perf_counter()
        for step in range(cfg.n_steps):
            obs = _control_period(cfg, exp, ls, step, timed=True, obs=obs)
            next_t += period
            delay = next_t - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        ls.stop = True

    def adapt_loop():
        period = 1.0 / cfg.adapt_rate_hz
        next_t = time.perf_counter()
        while not ls.stop:
            step = len(ls.control_rows)
            _adapt_once(cfg, exp, ls, step, time.perf_counter() - t_start, timed=True)
            next_t += period
            delay = next_t - time.perf_counter()
            if delay > 0:
                time.sleep(delay)

    threads = [threading.Thread(target=control_loop, name="control")]
    if cfg.adaptation:
        threads.append(threading.Thread(target=adapt_loop, name="learn", daemon=True))
    for t in threads:
        t.start()
    threads[0].join()
    ls.stop = True
    if len(threads) > 1:
        threads[1].join(timeout=5.0)


def run_closed_loop(cfg: ExperimentConfig) -> RunResult:
    exp = build_experiment(cfg)
    ls = _LoopState(cfg, exp)
    if cfg.mode == "deterministic":
        _run_deterministic(cfg, exp, ls)
    else:
        _run_realtime(cfg, exp, ls)
    xs_true = np.array(ls.xs_true)
    # residual per update when adapting, per control period otherwise
    if cfg.adaptation and len(ls.r_series) > 1:
        r_series = np.array(ls.r_series)
    else:
        r_series = np.tile(ls.r.r, (len(ls.control_rows) + 1, 1))
    flags = exp.evaluate(xs_true, r_series)
    solve_ms = np.array([row["solve_ms"] for row in ls.control_rows] or [0.0])
    update_ms = np.array([row["update_ms"] for row in ls.adapt_rows] or [0.0])
    summary = {
        "experiment": cfg.experiment,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "adaptation": cfg.adaptation,
        "steps": len(ls.control_rows),
        "updates": len(ls.adapt_rows),
        "duration_s": cfg.duration_s,
        **flags,
        "final_residual": ls.r.r.tolist(),
        "controller_failures": ls.controller.failures,
        "plan_target_failures": ls.plan_target_failures,
        "solve_ms_p50": float(np.percentile(solve_ms, 50)),
        "solve_ms_p95": float(np.percentile(solve_ms, 95)),
        "update_ms_p50": float(np.percentile(update_ms, 50)),
        "update_ms_p95": float(np.percentile(update_ms, 95)),
        "config": config_to_dict(cfg),
    }
    return RunResult(cfg, ls.control_rows, ls.adapt_rows, summary, xs_true, r_series)


# ---------------------------------------------------------------------------
# gradient region map
# ---------------------------------------------------------------------------


def gradient_region_map(
    cfg: ExperimentConfig,
    n_tip: int = 20,
    n_gap: int = 20,
    tip_range: tuple[float, float] = (0.1, 0.6),
    gap_range: tuple[float, float] = (-0.14, 0.14),
) -> list[dict]:
    """Classify one-step transitions by contact event vs contact prediction.

    The grid runs over the pole-tip position (state axis) and the injected
    wall-offset error on the near wall (model axis).  Each cell generates a
    transition from the true system at rest, evaluates the residual gradient
    under the corrupted prior at r = 0, and records the cell class.  Cell
    centers are offset by half a cell so no sample sits exactly on a class
    boundary or at zero model error.
    """
    if cfg.experiment != "cartpole_walls":
        raise ConfigError("the gradient region map is a cart-pole experiment")
    theta_true, _ = cartpole_walls_lcs(cfg.plant)
    map_cfg = LearnConfig(
        eps=1e-4, gamma=1e-2, rate=1e-3, q_d=velocity_weight_qd(2, 2, 1e7), buffer_size=1
    )
    rows = []
    u0 = np.zeros(1)
    for i in range(n_tip):
        tip = tip_range[0] + (i + 0.5) * (tip_range[1] - tip_range[0]) / n_tip
        x = np.array([tip, 0.0, 0.0, 0.0])
        st, lam_true = lcs_step(LcsState(x), u0, theta_true)
        pt = DataPoint(x, u0, st.x, k=0)
        event = bool(lam_true.max() > 1e-12)
        for j in range(n_gap):
            gap_err = gap_range[0] + (j + 0.5) * (gap_range[1] - gap_range[0]) / n_gap
            theta_prior = theta_true.with_offset(np.array([-gap_err, 0.0]))
            _, lam_pred = lcs_step(LcsState(x), u0, theta_prior)
            prediction = bool(lam_pred.max() > 1e-12)
            grad = loss_gradient(
                AugmentedBuffer(((pt, theta_prior),), 0), Residual.zeros(2), map_cfg
            )
            label = ("event" if event else "no_event") + (
                "_prediction" if prediction else "_no_prediction"
            )
            rows.append(
                {
                    "i": i,
                    "j": j,
                    "tip": tip,
                    "gap_error": gap_err,
                    "event": int(event),
                    "prediction": int(prediction),
                    "grad_norm": float(np.linalg.norm(grad)),
                    "label": label,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def _bench_trajectory(cfg: ExperimentConfig, exp, n: int):
    """Contact-rich canned trajectory of the true plant for timing runs."""
    if cfg.experiment == "cartpole_walls":
        x = np.array([0.3, -0.3, 0.5, 0.0])
    else:
        x = np.array([0.07, 0.0, 0.12, 0.0, 0.3, 0.0, 0.0, 0.0])
    pts = []
    states = []
    rng = np.random.default_rng(cfg.seed)
    for k in range(n):
        if cfg.experiment == "cartpole_walls":
            u = np.array([2.0 * np.sin(0.05 * k)])
        else:
            u = np.array([0.4 * np.cos(0.02 * k), 0.4 * np.sin(0.02 * k)])
        states.append(x.copy())
        x_next, _ = exp.plant_step(x, u)
        obs = x + rng.normal(size=x.shape) * cfg.noise_std
        obs_next = x_next + rng.normal(size=x.shape) * cfg.noise_std
        pts.append(DataPoint(obs, u, obs_next, k=k))
        x = x_next
    return pts, states


def bench(cfg: ExperimentConfig, calls: int = 1000) -> dict:
    """p50/p95 wall-times of the learner update and the MPC solve."""
    exp = build_experiment(cfg)
    pts, states = _bench_trajectory(cfg, exp, calls + cfg.learn.buffer_size + 1)

    buf = Buffer(capacity=cfg.learn.buffer_size)
    for pt in pts[: cfg.learn.buffer_size]:
        buf = buf.push(pt)
    r = Residual.zeros(exp.n_lam)
    opt = OptimizerState.zeros(exp.n_lam)
    adapt_ts = np.zeros(calls)
    for i in range(calls):
        buf = buf.push(pts[cfg.learn.buffer_size + i])
        t0 = time.perf_counter()
        r, opt, _ = adapt_update(buf, r, opt, exp.learner_linearizer, cfg.learn)
        adapt_ts[i] = (time.perf_counter() - t0) * 1e3

    ctrl = C3Controller(cfg.mpc, exp.n_u)
    u_prev = np.zeros(exp.n_u)
    c3_ts = np.zeros(calls)
    for i in range(calls):
        x = states[i % len(states)]
        theta_t = exp.controller_theta(x, u_prev)
        t0 = time.perf_counter()
        plan = ctrl.solve(x, theta_t, r, x_ref=exp.x_ref(i, x))
        c3_ts[i] = (time.perf_counter() - t0) * 1e3
        u_prev = np.asarray(plan.u0, dtype=float)

    report = {
        "experiment": cfg.experiment,
        "calls": calls,
        "adapt_ms": {
            "p50": float(np.percentile(adapt_ts, 50)),
            "p95": float(np.percentile(adapt_ts, 95)),
        },
        "c3_ms": {
            "p50": float(np.percentile(c3_ts, 50)),
            "p95": float(np.percentile(c3_ts, 95)),
        },
        "targets_ms": {"adapt_p95": 50.0, "c3_p95": 12.5},
        "structural": {
            "qp_solves_per_c3_call": cfg.mpc.admm_iterations,
            "projections_per_c3_call": cfg.mpc.admm_iterations * cfg.mpc.horizon,
            "inner_qps_per_update": cfg.learn.buffer_size,
        },
    }
    report["targets_met"] = {
        "adapt_p95": bool(report["adapt_ms"]["p95"] <= 50.0),
        "c3_p95": bool(report["c3_ms"]["p95"] <= 12.5),
    }
    return report
