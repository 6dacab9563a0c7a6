"""Chance-constrained control of a double integrator with learned friction.

Plant (sampling time ``Ts``)::

    p+ = p + Ts v
    v+ = v + Ts (u - F(v)),   F(v) ~ N(h(v), g(v))

The controller plans ``H`` inputs against the friction model's mean
``mu(v)`` and tightens the velocity box by ``z * sigma_k``. By default
``sigma_k = Ts s(v_{k-1})`` is the one-step predictive std, since the plan is
recomputed every step; ``propagation="accumulate"`` instead uses
``sigma_k**2 = sigma_{k-1}**2 + Ts**2 s(v_{k-1})**2``. Each plan is found by five
rounds of sequential quadratic programming around the previous plan, with
``mu`` linearized by forward differences.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import quadprog
from scipy.linalg import solve_triangular
from scipy.stats import norm

from .datagen import FRICTION, GroundTruth, sample_friction
from .gp import VARIANCE_FLOOR, fit_posterior_gp
from .iterative import IterConfig, fit_hetgp
from .kernel import KernelConfig
from .rng import Stream

MODES = ("proposed", "aggressive", "cautious", "oracle")
DEFAULT_SIGMA0 = {"proposed": 1.0, "aggressive": 0.2, "cautious": 1.0, "oracle": None}
SCORED_WINDOWS = ((0.0, 1.0), (2.0, 3.0))
PROPAGATIONS = ("one_step", "accumulate")
VIOLATION_TOL = 1e-9


@dataclass(frozen=True)
class PlantConfig:
    Ts: float = 0.25
    sim_duration: float = 4.0
    truth: GroundTruth = FRICTION
    p0: float = 0.0
    v0: float = 0.0

    def __post_init__(self):
        if not self.Ts > 0:
            raise ValueError(f"Ts must be > 0, got {self.Ts}")
        steps = self.sim_duration / self.Ts
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ValueError("sim_duration must be a positive multiple of Ts")

    @property
    def n_steps(self):
        return int(round(self.sim_duration / self.Ts))


@dataclass(frozen=True)
class ControllerConfig:
    """Planner settings.

    ``z_score`` defaults to the two-sided normal quantile of ``p_x``, snapped
    to the nearest whole number when within 1e-3 of it (2.0 for 95.44 %). ``sigma0_sq`` of ``None`` selects the
    mode's default (1.0 proposed, 0.2 aggressive, 1.0 cautious).
    """

    horizon: int = 8
    v_min: float = -1.0
    v_max: float = 1.0
    p_x: float = 0.9544
    z_score: float = None
    q_p: float = 10.0
    r_u: float = 1.0
    u_max: float = 10.0
    p_ref_before: float = 1.0
    p_ref_after: float = 0.0
    p_ref_switch: float = 2.0
    preview: bool = False
    propagation: str = "one_step"
    gp_mode: str = "proposed"
    sigma0_sq: float = None
    length_scale: float = 0.5
    n_train: int = 100
    sqp_iters: int = 5
    fd_step: float = 1e-4

    def __post_init__(self):
        if not 0 < self.p_x < 1:
            raise ValueError(f"p_x must lie in (0, 1), got {self.p_x}")
        z_exact = norm.ppf(0.5 * (1.0 + self.p_x))
        if self.z_score is None:
            z = float(z_exact)
            if abs(z - round(z)) <= 1e-3:
                z = float(round(z))
            object.__setattr__(self, "z_score", z)
        elif abs(self.z_score - z_exact) > 1e-3:
            raise ValueError(
                f"z_score {self.z_score} inconsistent with p_x {self.p_x} "
                f"(expected {z_exact:.4f})"
            )
        if self.gp_mode not in MODES:
            raise ValueError(f"gp_mode must be one of {MODES}, got {self.gp_mode!r}")
        if self.sigma0_sq is None and self.gp_mode != "oracle":
            object.__setattr__(self, "sigma0_sq", DEFAULT_SIGMA0[self.gp_mode])
        if self.propagation not in PROPAGATIONS:
            raise ValueError(f"propagation must be one of {PROPAGATIONS}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.v_min >= self.v_max:
            raise ValueError("v_min must be below v_max")

    def p_ref(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t < self.p_ref_switch - 1e-12, self.p_ref_before, self.p_ref_after)


# -- friction models ---------------------------------------------------------


class OracleFriction:
    """The true friction mean and noise std."""

    fallback = False

    def __init__(self, truth):
        self.truth = truth

    def mean(self, v):
        return self.truth.mean_fn(np.asarray(v, dtype=float))

    def mean1(self, v):
        return float(self.truth.mean_fn(v))

    def mean_std(self, v):
        v = np.asarray(v, dtype=float)
        return self.truth.mean_fn(v), np.sqrt(self.truth.var_fn(v))


class GPFriction:
    """Scalar-input view of a fitted posterior GP (and optional prior GP).

    Evaluation is specialised to 1-D inputs for speed inside the planner.
    """

    fallback = False

    def __init__(self, posterior, prior=None):
        self.x = posterior.X_train[:, 0]
        self.l = posterior.kernel.length_scale
        self.alpha = posterior.alpha
        c, lower = posterior.chol
        self.L = np.tril(c) if lower else np.triu(c).T
        self.s0 = posterior.sigma0_sq
        self.prior_alpha = None if prior is None else prior.alpha

    def _k(self, v):
        d = np.asarray(v, dtype=float).reshape(-1, 1) - self.x
        return np.exp(-self.l * d * d)

    def mean(self, v):
        return self._k(v) @ self.alpha

    def mean1(self, v):
        d = v - self.x
        return float(np.exp(-self.l * d * d) @ self.alpha)

    def mean_std(self, v):
        v = np.asarray(v, dtype=float)
        Ks = self._k(v)
        mu = Ks @ self.alpha
        noise = self.s0
        if self.prior_alpha is not None:
            noise = np.maximum(self.s0 + Ks @ self.prior_alpha, VARIANCE_FLOOR)
        V = solve_triangular(self.L, Ks.T, lower=True, check_finite=False)
        quad = np.einsum("ij,ij->j", V, V)
        var = np.maximum(1.0 + noise - quad, VARIANCE_FLOOR)
        return mu.reshape(v.shape), np.sqrt(var).reshape(v.shape)


def build_friction_model(cfg, data=None, truth=FRICTION):
    """Friction model for ``cfg.gp_mode`` fitted on ``data`` (unused for oracle).

    A proposed-mode fit that does not converge is replaced by the
    constant-noise GP with the same ``sigma0_sq``; the returned model's
    ``fallback`` attribute records this.
    """
    if cfg.gp_mode == "oracle":
        return OracleFriction(truth)
    kernel = KernelConfig(cfg.length_scale)
    if cfg.gp_mode == "proposed":
        het = fit_hetgp(data, IterConfig(sigma0_sq=cfg.sigma0_sq, kernel=kernel))
        if het.report.converged:
            return GPFriction(het.posterior, het.prior)
        model = GPFriction(fit_posterior_gp(data, kernel, cfg.sigma0_sq))
        model.fallback = True
        return model
    return GPFriction(fit_posterior_gp(data, kernel, cfg.sigma0_sq))


# -- planner ------------------------------------------------------------------


@dataclass
class Plan:
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    sigma: np.ndarray
    feasible: bool = True


def _rollout(p0, v0, u, model, Ts):
    H = u.shape[0]
    p = np.empty(H + 1)
    v = np.empty(H + 1)
    p[0], v[0] = p0, v0
    for k in range(H):
        mu = model.mean1(v[k])
        p[k + 1] = p[k] + Ts * v[k]
        v[k + 1] = v[k] + Ts * (u[k] - mu)
    return p, v


def _sigma(s, Ts, propagation):
    if propagation == "accumulate":
        return np.sqrt(np.cumsum((Ts * s) ** 2))
    return Ts * s


def plan_step(state, model, cfg, Ts, t0=0.0, u_init=None):
    """Plan ``H`` inputs from ``state = (p, v)`` and return the :class:`Plan`.

    The first input ``plan.u[0]`` is the one to apply. When the tightened
    velocity interval is empty somewhere along the horizon, or the QP has no
    solution, the plan falls back to steering towards the interval midpoint
    and ``plan.feasible`` is False.
    """
    p0, v0 = float(state[0]), float(state[1])
    H = cfg.horizon
    z = cfg.z_score
    u = np.zeros(H) if u_init is None else np.array(u_init, dtype=float)
    if cfg.preview:
        pref = cfg.p_ref(t0 + Ts * np.arange(1, H + 1))
    else:
        pref = np.full(H, float(cfg.p_ref(t0)))
    h = cfg.fd_step

    feasible = True
    for _ in range(cfg.sqp_iters):
        p_bar, v_bar = _rollout(p0, v0, u, model, Ts)
        mu, s = model.mean_std(v_bar[:H])
        mu_h = model.mean(v_bar[:H] + h)
        dmu = (np.asarray(mu_h) - mu) / h
        sigma = _sigma(s, Ts, cfg.propagation)
        lo = cfg.v_min + z * sigma
        hi = cfg.v_max - z * sigma
        if np.any(lo > hi):
            feasible = False
            break

        # sensitivities of v_1..v_H and p_1..p_H to u_0..u_{H-1}
        Gv = np.zeros((H, H))
        Gp = np.zeros((H, H))
        a = 1.0 - Ts * dmu
        for k in range(H):
            row_v = Gv[k - 1] * a[k] if k > 0 else np.zeros(H)
            row_v = row_v.copy()
            row_v[k] += Ts
            Gv[k] = row_v
            Gp[k] = (Gp[k - 1] if k > 0 else 0.0) + (Ts * Gv[k - 1] if k > 0 else 0.0)

        P = cfg.q_p * Gp.T @ Gp + cfg.r_u * np.eye(H)
        q = cfg.q_p * Gp.T @ (p_bar[1:] - pref) + cfg.r_u * u
        C = np.vstack([Gv, -Gv, np.eye(H), -np.eye(H)])
        b = np.concatenate([
            lo - v_bar[1:],
            v_bar[1:] - hi,
            -cfg.u_max - u,
            u - cfg.u_max,
        ])
        try:
            du = quadprog.solve_qp(2.0 * P, -2.0 * q, C.T, b, 0)[0]
        except ValueError:
            feasible = False
            break
        u = u + du

    if not feasible:
        v_mid = 0.5 * (cfg.v_min + cfg.v_max)
        mu0 = model.mean1(v0)
        u = np.full(H, np.clip(mu0 + (v_mid - v0) / Ts, -cfg.u_max, cfg.u_max))
        p_bar, v_bar = _rollout(p0, v0, u, model, Ts)
        _, s = model.mean_std(v_bar[:H])
        sigma = _sigma(s, Ts, cfg.propagation)
        return Plan(u=u, v=v_bar, p=p_bar, sigma=sigma, feasible=False)

    p_bar, v_bar = _rollout(p0, v0, u, model, Ts)
    return Plan(u=u, v=v_bar, p=p_bar, sigma=sigma, feasible=True)


# -- closed loop --------------------------------------------------------------


def scored_steps(plant, windows=SCORED_WINDOWS):
    """Indices ``k`` whose time ``k Ts`` lies in any closed scoring window."""
    k = np.arange(plant.n_steps)
    t = k * plant.Ts
    mask = np.zeros(k.shape, dtype=bool)
    for a, b in windows:
        mask |= (t >= a - 1e-9) & (t <= b + 1e-9)
    return k[mask]


@dataclass
class TrialResult:
    seed: int
    trial_index: int
    mode: str
    trajectory: np.ndarray = field(repr=False)
    closed_loop_cost: float
    violations: int
    scored_steps: int
    infeasible_steps: int
    model_fallback: bool = False
    violation_windows: tuple = SCORED_WINDOWS

    def to_dict(self):
        d = asdict(self)
        d["trajectory"] = self.trajectory.tolist()
        d["violation_windows"] = [list(w) for w in self.violation_windows]
        return d


def trial_streams(seed, trial_index):
    """Stream ids for training data and plant noise of one trial."""
    return 2 * trial_index, 2 * trial_index + 1


def run_trial(plant, cfg, seed, trial_index=0, model=None):
    """Closed-loop run; fits the friction model unless one is given.

    Training data come from stream ``(seed, 2 i)`` and plant noise from
    ``(seed, 2 i + 1)`` for trial index ``i``, so different modes with the same
    seed see identical data and disturbances.
    """
    data_stream, noise_stream = trial_streams(seed, trial_index)
    if model is None:
        data = None
        if cfg.gp_mode != "oracle":
            data = sample_friction(cfg.n_train, seed, plant.truth, stream=data_stream)
        model = build_friction_model(cfg, data, plant.truth)
    n = plant.n_steps
    Ts = plant.Ts
    xi = Stream(seed, noise_stream).normal(n)
    traj = np.empty((n, 4))
    p, v = plant.p0, plant.v0
    u_plan = None
    infeasible = 0
    for k in range(n):
        t = k * Ts
        plan = plan_step((p, v), model, cfg, Ts, t0=t, u_init=u_plan)
        infeasible += not plan.feasible
        u = float(plan.u[0])
        u_plan = np.append(plan.u[1:], plan.u[-1])
        traj[k] = (t, p, v, u)
        F = float(plant.truth.mean_fn(v) + np.sqrt(plant.truth.var_fn(v)) * xi[k])
        p, v = p + Ts * v, v + Ts * (u - F)

    pref = cfg.p_ref(traj[:, 0])
    cost = float(np.sum(cfg.q_p * (traj[:, 1] - pref) ** 2 + cfg.r_u * traj[:, 3] ** 2))
    idx = scored_steps(plant)
    vs = traj[idx, 2]
    viol = int(np.count_nonzero((vs > cfg.v_max + VIOLATION_TOL) | (vs < cfg.v_min - VIOLATION_TOL)))
    return TrialResult(
        seed=int(seed),
        trial_index=int(trial_index),
        mode=cfg.gp_mode,
        trajectory=traj,
        closed_loop_cost=cost,
        violations=viol,
        scored_steps=int(idx.size),
        infeasible_steps=int(infeasible),
        model_fallback=bool(getattr(model, "fallback", False)),
    )


def summarize(results):
    """Table-style summary; independent of the order of ``results``."""
    results = sorted(results, key=lambda r: r.trial_index)
    costs = np.sort([r.closed_loop_cost for r in results])
    viol = sum(r.violations for r in results)
    scored = sum(r.scored_steps for r in results)
    return {
        "mode": results[0].mode,
        "trials": len(results),
        "cost_min": float(costs[0]),
        "cost_median": float(np.median(costs)),
        "cost_max": float(costs[-1]),
        "violation_pct": 100.0 * viol / scored,
        "violations": int(viol),
        "scored_steps": int(scored),
        "infeasible_steps": int(sum(r.infeasible_steps for r in results)),
        "model_fallbacks": int(sum(r.model_fallback for r in results)),
        "scored_windows_s": [list(w) for w in SCORED_WINDOWS],
    }


def _run_one(args):
    plant, cfg, seed, i = args
    return run_trial(plant, cfg, seed, i)


def n_workers():
    cap = int(os.environ.get("HETGP_THREADS", "0") or 0)
    cpus = os.cpu_count() or 1
    return max(1, min(cpus, cap) if cap > 0 else cpus)


def run_trials(plant, cfg, trials, base_seed, workers=None):
    jobs = [(plant, cfg, base_seed, i) for i in range(int(trials))]
    workers = n_workers() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def monte_carlo(plant, cfg, trials, base_seed, workers=None):
    """Run ``trials`` closed-loop trials and return ``(summary, results)``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    results = run_trials(plant, cfg, trials, base_seed, workers)
    return summarize(results), results


def trajectory_band(results):
    """Pointwise-in-time median and median +/- 2 std across trials.

    Columns: ``t, p_median, v_median, v_lo, v_hi, u_median``.
    """
    stack = np.stack([r.trajectory for r in sorted(results, key=lambda r: r.trial_index)])
    t = stack[0, :, 0]
    p_med = np.median(stack[:, :, 1], axis=0)
    v_med = np.median(stack[:, :, 2], axis=0)
    v_std = np.std(stack[:, :, 2], axis=0)
    u_med = np.median(stack[:, :, 3], axis=0)
    return np.column_stack([t, p_med, v_med, v_med - 2 * v_std, v_med + 2 * v_std, u_med])
