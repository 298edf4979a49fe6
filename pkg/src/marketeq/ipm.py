"""Second-order tatonnement drivers: LogBar and PathFol.

LogBar follows the log-barrier central path: shrink mu geometrically and
re-center with one inexact Newton step per mu,
    (H~ + mu I) d = -(P grad phi - mu 1),    p+ = p (1 + d).
Initialization is free: p0 = mu0 * 1 with mu0 = sqrt(W/Q) lies in the
neighborhood C(mu0, Q) because total demand at uniform prices is bounded by
W / mu0.

PathFol follows a barrier-free homotopy phi_t = phi - t<grad phi(p0), p>,
driving t from 1 to 0 with steps sized by the self-concordance constant,
    t+ = max(t - gamma / (C ||P grad phi(p0)||*_{H~}), 0),
    H~ d = -P(grad phi - t+ grad phi(p0)),
then finishes with pure inexact Newton inside the quadratic region.

Both record a SolveTrace (CSV: one row per iteration, trailing status
comment) and stop on the equilibrium certificate ||grad phi||_inf <= eps.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import hessian as hes
from .market import MarketInstance
from .oracle import (
    OracleError,
    PotentialConstants,
    market_state,
    potential_constants,
)

STATUS_CONVERGED = "Converged"
STATUS_MAXITERS = "MaxIters"
STATUS_NUMFAIL = "NumericalFailure"

TRACE_HEADER = "k,homotopy,grad_inf,grad_l2,nbhd_resid,decrement,step_norm,pcg_iters,wall_ms"

MU_FLOOR = 1e-12
PRACTICAL_C_PHI = 10.0  # run-time default; theory estimate via potential_constants


class ConfigError(ValueError):
    """Invalid solver configuration."""


@dataclass
class TraceRow:
    k: int
    homotopy: float
    grad_inf: float
    grad_l2: float
    nbhd_resid: float
    decrement: float
    step_norm: float = math.nan
    pcg_iters: int | None = None
    wall_ms: float = math.nan


@dataclass
class SolveTrace:
    rows: list[TraceRow] = field(default_factory=list)
    status: str = STATUS_MAXITERS
    extras: dict = field(default_factory=dict)

    def iterations(self) -> int:
        return len(self.rows)

    def to_csv(self, path: str) -> None:
        from .market import atomic_write_text

        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float) and math.isnan(v):
                return ""
            if isinstance(v, float):
                return f"{v:.17g}"
            return str(v)

        lines = [TRACE_HEADER]
        for r in self.rows:
            lines.append(",".join(fmt(v) for v in (
                r.k, r.homotopy, r.grad_inf, r.grad_l2, r.nbhd_resid,
                r.decrement, r.step_norm, r.pcg_iters, r.wall_ms)))
        lines.append(f"# status={self.status}")
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str) -> "SolveTrace":
        rows = []
        status = STATUS_MAXITERS
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != TRACE_HEADER:
                raise ValueError(f"unexpected trace header: {header!r}")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    if "status=" in line:
                        status = line.split("status=", 1)[1].strip()
                    continue
                parts = line.split(",")
                conv = lambda s: math.nan if s == "" else float(s)
                rows.append(TraceRow(
                    k=int(parts[0]), homotopy=conv(parts[1]), grad_inf=conv(parts[2]),
                    grad_l2=conv(parts[3]), nbhd_resid=conv(parts[4]), decrement=conv(parts[5]),
                    step_norm=conv(parts[6]),
                    pcg_iters=None if parts[7] == "" else int(parts[7]),
                    wall_ms=conv(parts[8])))
        return cls(rows=rows, status=status)


@dataclass
class LogBarConfig:
    Q: float = 0.25
    eps: float = 1e-7
    sigma_override: float | None = None
    hessian_mode: str = "exact"  # exact | dr1 | pcg
    eps_k: float = 1e-8
    max_iters: int = 500
    step_safeguard_eta: float = 0.01
    theory_strict: bool = False  # Q from the worst-case formula; enables mu_stop
    mu_stop: bool = False  # stop once mu <= eps/(1+sqrt(n)) (secondary guarantee)
    keep_iterates: bool = False
    # near-linear markets: barrier phase at a smooth sigma, then sigma
    # continuation with trust-region polishing (see _linear_continuation_run)
    linear_continuation: bool = True

    def validate(self, instance: MarketInstance) -> None:
        if not (0.0 < self.Q < 0.5):
            raise ConfigError("Q must lie in (0, 1/2)")
        if self.sigma_override is not None and not (0.0 < self.sigma_override < 1.0):
            raise ConfigError("sigma_override must lie in (0, 1)")
        if self.hessian_mode not in ("exact", "dr1", "pcg"):
            raise ConfigError(f"unknown hessian mode {self.hessian_mode!r}")
        if not (0.0 < self.step_safeguard_eta < 1.0):
            raise ConfigError("step safeguard eta must lie in (0, 1)")
        if self.hessian_mode == "exact" and instance.n > hes.DENSE_LIMIT:
            raise ConfigError(f"exact hessian mode capped at n={hes.DENSE_LIMIT}; use dr1/pcg")
        if self.hessian_mode == "dr1" and (instance.constraints or instance.is_linear):
            raise ConfigError("dr1 mode needs an unconstrained CES/additive market")


@dataclass
class PathFolConfig:
    beta: float = 0.01
    gamma_step: float = 0.04
    delta_target: float = 1e-3
    hessian_mode: str = "exact"
    eps: float = 1e-7
    eps_k: float = 1e-10
    max_iters: int = 2000
    c_phi: float | None = None  # None -> practical default constant
    kappa_cap: float = 1e4
    step_safeguard_eta: float = 0.01
    delta_cert: float | None = None  # certified delta from pathfol_select_params
    keep_iterates: bool = False

    def validate(self, instance: MarketInstance) -> None:
        if not (0.0 < self.beta < 0.3):
            raise ConfigError("beta must lie in (0, 0.3)")
        if not (self.beta + self.gamma_step < 1.0 and 0.0 < self.gamma_step < 1.0):
            raise ConfigError("need beta + gamma < 1 and gamma in (0, 1)")
        if not (self.gamma_step > 2.0 * self.beta):
            raise ConfigError("need gamma > 2*beta")
        if self.hessian_mode not in ("exact", "dr1", "pcg"):
            raise ConfigError(f"unknown hessian mode {self.hessian_mode!r}")
        if self.hessian_mode == "exact" and instance.n > hes.DENSE_LIMIT:
            raise ConfigError(f"exact hessian mode capped at n={hes.DENSE_LIMIT}; use dr1/pcg")
        if self.hessian_mode == "dr1" and (instance.constraints or instance.is_linear):
            raise ConfigError("dr1 mode needs an unconstrained CES/additive market")


# ---------------------------------------------------------------------------
# linear-solver facade: one assembled operator, several regularized solves


class _StepSolver:
    def __init__(self, op: hes.ScaledHessianOp, mode: str, eps_k: float):
        self.op = op
        self.mode = mode
        self.eps_k = eps_k
        self._dense = None
        self._factors: dict[float, tuple] = {}
        self._precond = None
        self.fallbacks = 0

    def _factor(self, mu: float):
        # Jacobi-scale before factoring: near-linear markets make H span
        # ~1/sigma^2 in magnitude and a raw Cholesky loses the small block
        if self._dense is None:
            self._dense = self.op.dense()
        if mu not in self._factors:
            d = np.maximum(np.diag(self._dense) + mu, 1e-300)
            s = 1.0 / np.sqrt(d)
            A = (self._dense + mu * np.eye(self.op.n)) * s[:, None] * s[None, :]
            self._factors[mu] = (scipy.linalg.cho_factor(A, check_finite=False), s)
        return self._factors[mu]

    def _dense_solve(self, mu: float, rhs: np.ndarray) -> np.ndarray:
        cf, s = self._factor(mu)
        d = s * scipy.linalg.cho_solve(cf, s * rhs, check_finite=False)
        for _ in range(2):  # iterative refinement with the exact matvec
            r = rhs - (self.op.matvec(d) + mu * d)
            d = d + s * scipy.linalg.cho_solve(cf, s * r, check_finite=False)
        return d

    def precond(self):
        if self._precond is None:
            self._precond = self.op.preconditioner()
        return self._precond

    def solve(self, mu: float, rhs: np.ndarray):
        """Solve (H~ + mu I) d = rhs; returns (d, pcg iterations or None)."""
        if self.mode == "exact":
            return self._dense_solve(mu, rhs), None
        if self.mode == "dr1":
            try:
                return hes.dr1_solve(self.op, mu, rhs), None
            except hes.SingularUpdateError:
                self.fallbacks += 1
                d, it = hes.pcg_solve(self.op, mu, rhs, self.eps_k, self.precond())
                return d, it
        d, it = hes.pcg_solve(self.op, mu, rhs, self.eps_k, self.precond())
        return d, it

    def dual_norm(self, g_scaled: np.ndarray) -> float:
        """||g||*_{H~ + floor} = sqrt(g^T (H~ + floor I)^{-1} g)."""
        d, _ = self.solve(MU_FLOOR, g_scaled)
        return math.sqrt(max(float(g_scaled @ d), 0.0))


def newton_decrement(op: hes.ScaledHessianOp, g_scaled: np.ndarray,
                     mode: str = "exact", eps_k: float = 1e-10) -> float:
    """Inexact Newton decrement lambda~ = ||P grad phi||*_{H~(p)}."""
    return _StepSolver(op, mode, eps_k).dual_norm(np.asarray(g_scaled, dtype=float))


def decrement_at(instance: MarketInstance, p, hessian_mode: str = "exact") -> float:
    state = market_state(instance, p)
    op = hes.assemble_from_state(state, instance, hes.EXACT)
    return newton_decrement(op, state.p * state.grad, mode=hessian_mode)


# ---------------------------------------------------------------------------
# LogBar


def effective_budget(instance: MarketInstance) -> float:
    """sum beta_i w_i with beta_i = 1 (additive) or 1 + sigma*n (linear)."""
    if instance.is_linear:
        return float(np.sum(instance.budgets * (1.0 + np.array(
            [u.sigma for u in instance.utilities]) * instance.n)))
    return instance.total_budget()


def lemma_initial_mu(instance: MarketInstance, Q: float) -> float:
    """The sqrt(W_eff/Q) starting value for the uniform-price center."""
    return math.sqrt(effective_budget(instance) / Q)


def logbar_init(instance: MarketInstance, Q: float):
    """Initial center: p0 = mu0 * 1 on the ray of uniform prices.

    Start from mu0 = sqrt(W_eff / Q) and verify membership in C(mu0, Q)
    directly; if the residual ||sum x_i(mu0 1)|| (which is bounded by
    W_eff / mu0) still exceeds Q, double mu0 until it does not.  The sqrt
    choice alone does not imply membership -- the demand bound only gives
    residual <= W_eff/mu0, so certainty requires mu0 >= W_eff/Q -- but it
    passes at practical Q through l2 slack and keeps mu0 small.  W_eff
    is sum beta_i w_i with beta_i = 1 for the additive family and
    1 + sigma*n for linear-barrier players (whose gradient scales demand
    by that factor).
    """
    w_eff = effective_budget(instance)
    mu0 = lemma_initial_mu(instance, Q)
    for _ in range(128):
        p0 = np.full(instance.n, mu0)
        resid = np.linalg.norm(p0 * market_state(instance, p0).grad - mu0) / mu0
        if resid <= Q * (1.0 + 1e-12):
            return mu0, p0
        if mu0 >= w_eff / Q:
            break
        mu0 = min(2.0 * mu0, w_eff / Q)
    raise OracleError(f"initial center residual {resid} exceeds Q={Q}")


def theory_strict_Q(instance: MarketInstance, eps: float) -> float:
    """Worst-case neighborhood radius Q <= eps / (14 eps + 4 T_phi (sqrt(n)+1))."""
    consts = potential_constants(instance, [])
    return eps / (14.0 * eps + 4.0 * consts.T_phi * (math.sqrt(instance.n) + 1.0))


def _apply_safeguard(d: np.ndarray, eta: float):
    dmin = float(d.min())
    if 1.0 + dmin < eta:
        return d * ((1.0 - eta) / (-dmin)), True
    return d, False


SIGMA_SMOOTH = 0.05  # barrier-utility level the plain loop tracks comfortably


def _stationarity_polish(instance, p, eps, max_nfev=400):
    """Trust-region solve of the scaled stationarity system P grad phi = 0.

    Works in log-price coordinates with the analytic Jacobian H + diag(P g),
    row-scaled by the Hessian diagonal (near-linear markets span ~1/sigma^2
    in magnitude).  Returns (p, grad_inf, nfev); keeps the incoming point
    when the solver fails to improve it.
    """
    import scipy.optimize

    state = market_state(instance, p)
    op = hes.assemble_from_state(state, instance, hes.EXACT)
    scale = 1.0 / np.sqrt(np.maximum(np.diag(op.dense()), 1e-300))

    def fun(q):
        pp = np.exp(q)
        return scale * (pp * market_state(instance, pp).grad)

    def jac(q):
        pp = np.exp(q)
        st = market_state(instance, pp)
        J = hes.assemble_from_state(st, instance, hes.EXACT).dense()
        return scale[:, None] * (J + np.diag(pp * st.grad))

    sol = scipy.optimize.root(fun, np.log(p), jac=jac, method="hybr",
                              tol=1e-15, options={"maxfev": max_nfev})
    p_try = np.exp(sol.x)
    g_try = float(np.max(np.abs(market_state(instance, p_try).grad)))
    g_old = float(np.max(np.abs(state.grad)))
    if g_try < g_old and np.all(np.isfinite(p_try)) and np.all(p_try > 0):
        return p_try, g_try, int(sol.nfev)
    return p, g_old, int(sol.nfev)


def _linear_continuation_run(instance: MarketInstance, config: LogBarConfig, callback=None):
    """LogBar for near-linear markets: barrier phase at a smooth utility
    regularization, then geometric continuation in sigma down to the target,
    each stage polished by the trust-region stationarity solve.

    The plain one-step loop cannot track the central path once sigma is at
    the eps/n scale the clearing bound wants -- the potential's scaled
    Lipschitz constant grows like 1/sigma^3 -- so the homotopy runs in
    (mu, sigma) jointly instead.
    """
    from .market import with_barrier_sigma

    target = instance.utilities[0].sigma
    smooth = with_barrier_sigma(instance, SIGMA_SMOOTH)
    inner_cfg = LogBarConfig(
        Q=config.Q, eps=max(config.eps, 1e-5),
        sigma_override=config.sigma_override or 0.8,
        hessian_mode=config.hessian_mode, eps_k=config.eps_k,
        max_iters=config.max_iters, step_safeguard_eta=config.step_safeguard_eta)
    p, trace = logbar_run(smooth, inner_cfg, callback=callback)
    trace.extras["continuation"] = []
    if trace.status == STATUS_NUMFAIL:
        return p, trace

    sigma = SIGMA_SMOOTH
    k = trace.rows[-1].k if trace.rows else 0
    while sigma > target:
        sigma = max(sigma * 0.1, target)
        stage = with_barrier_sigma(instance, sigma)
        p, ginf, nfev = _stationarity_polish(stage, p, config.eps)
        k += 1
        trace.rows.append(TraceRow(k=k, homotopy=math.nan, grad_inf=ginf,
                                   grad_l2=math.nan, nbhd_resid=math.nan,
                                   decrement=math.nan, step_norm=math.nan))
        trace.extras["continuation"].append({"sigma": sigma, "grad_inf": ginf, "nfev": nfev})
    final = market_state(instance, p)
    ginf = float(np.max(np.abs(final.grad)))
    if ginf > config.eps:
        p, ginf, nfev = _stationarity_polish(instance, p, config.eps, max_nfev=1000)
        trace.extras["continuation"].append({"sigma": target, "grad_inf": ginf, "nfev": nfev})
    trace.status = STATUS_CONVERGED if ginf <= config.eps else STATUS_MAXITERS
    return p, trace


def logbar_run(instance: MarketInstance, config: LogBarConfig, callback=None):
    """Run the log-barrier driver; returns (p, SolveTrace).

    The scheme is the one-inexact-Newton-step-per-mu short-step loop, whose
    recorded mu column is exactly mu0 * sigma^k.  Near-linear markets
    (sigma below SIGMA_SMOOTH) detour through the sigma continuation, since
    their scaled Lipschitz constant ~1/sigma^3 makes the plain loop lose
    the path in floating point.
    """
    config.validate(instance)
    if instance.is_linear and instance.utilities[0].sigma < SIGMA_SMOOTH \
            and config.linear_continuation:
        return _linear_continuation_run(instance, config, callback=callback)
    Q = theory_strict_Q(instance, config.eps) if config.theory_strict else config.Q
    try:
        mu, p = logbar_init(instance, Q)
    except OracleError as exc:
        return np.ones(instance.n), SolveTrace(
            status=STATUS_NUMFAIL, extras={"error": str(exc)})
    n = instance.n
    sigma = config.sigma_override if config.sigma_override is not None else \
        (Q + math.sqrt(n)) / (2.0 * Q + math.sqrt(n))
    mu_threshold = config.eps / (1.0 + math.sqrt(n))

    trace = SolveTrace(extras={"Q": Q, "sigma": sigma, "mu0": mu, "safeguards": 0,
                               "dr1_fallbacks": 0, "mu_threshold_k": None})
    iterates = [p.copy()] if config.keep_iterates else None
    status = STATUS_MAXITERS
    for k in range(config.max_iters):
        t0 = time.perf_counter()
        try:
            state = market_state(instance, p)
            op = hes.assemble_from_state(state, instance, hes.EXACT)
        except (OracleError, FloatingPointError) as exc:
            trace.extras["error"] = str(exc)
            status = STATUS_NUMFAIL
            break
        g = state.grad
        gs = p * g
        solver = _StepSolver(op, config.hessian_mode, config.eps_k)
        row = TraceRow(
            k=k, homotopy=mu,
            grad_inf=float(np.max(np.abs(g))), grad_l2=float(np.linalg.norm(g)),
            nbhd_resid=float(np.linalg.norm(gs - mu) / mu),
            decrement=solver.dual_norm(gs),
        )
        trace.rows.append(row)
        if row.grad_inf <= config.eps:
            status = STATUS_CONVERGED
            break
        if trace.extras["mu_threshold_k"] is None and mu <= mu_threshold:
            trace.extras["mu_threshold_k"] = k
            if config.mu_stop:
                status = STATUS_CONVERGED
                break
        if callback is not None:
            stop = callback(k, p)
            if stop:
                status = stop if isinstance(stop, str) else STATUS_CONVERGED
                break
        mu = sigma * mu
        rhs = -(gs - mu)
        try:
            d, pcg_iters = solver.solve(mu, rhs)
        except (FloatingPointError, scipy.linalg.LinAlgError) as exc:
            trace.extras["error"] = str(exc)
            status = STATUS_NUMFAIL
            break
        if not np.all(np.isfinite(d)):
            trace.extras["error"] = "non-finite Newton step"
            status = STATUS_NUMFAIL
            break
        d, clipped = _apply_safeguard(d, config.step_safeguard_eta)
        if clipped:
            trace.extras["safeguards"] += 1
        trace.extras["dr1_fallbacks"] += solver.fallbacks
        p = p * (1.0 + d)
        row.step_norm = float(np.linalg.norm(d))
        row.pcg_iters = pcg_iters
        row.wall_ms = (time.perf_counter() - t0) * 1e3
        if iterates is not None:
            iterates.append(p.copy())
    trace.status = status
    if iterates is not None:
        trace.extras["iterates"] = iterates
        trace.extras["mus"] = [r.homotopy for r in trace.rows]
    return p, trace


# ---------------------------------------------------------------------------
# PathFol


def omega_star(t: float) -> float:
    return -t - math.log(1.0 - t)


def _c12_certificate(delta: float, beta: float, gamma: float) -> dict:
    s = math.sqrt(1.0 + delta)
    bg = beta + gamma
    cert = {
        "delta": delta,
        "beta": beta,
        "gamma": gamma,
        "c12b_ok": bg < 1.0 and beta < 0.3 and gamma < 1.0 and gamma > 2.0 * beta,
        "c12c_lhs": math.inf,
        "c12c_rhs": beta,
        "c12d_lhs": gamma * (0.3 - beta) / 2.0,
        "c12d_rhs": omega_star(bg) if bg < 1.0 else math.inf,
    }
    if bg * s < 1.0:
        cert["c12c_lhs"] = (1.0 + delta) * bg**2 / (1.0 - bg * s) ** 2 + \
            delta * bg * s / (1.0 - bg * s)
    cert["c12c_ok"] = cert["c12c_lhs"] <= beta
    cert["c12d_ok"] = cert["c12d_lhs"] > cert["c12d_rhs"]
    cert["feasible"] = cert["c12b_ok"] and cert["c12c_ok"] and cert["c12d_ok"]
    return cert


def pathfol_select_params(constants: PotentialConstants, eps: float,
                          delta_target: float = 1e-3, **config_kwargs):
    """Pick (beta, gamma) = (0.01, 0.04), halving with gamma = 4*beta fixed
    until the full parameter system holds at delta = min(delta_target,
    C_phi*eps/2).  Returns (PathFolConfig, certificate)."""
    if not math.isfinite(constants.C_phi):
        raise ConfigError("C_phi must be finite to select parameters")
    delta = min(delta_target, constants.C_phi * eps / 2.0)
    beta = 0.01
    while beta >= 1e-8:
        cert = _c12_certificate(delta, beta, 4.0 * beta)
        if cert["feasible"]:
            cfg = PathFolConfig(beta=beta, gamma_step=4.0 * beta, delta_target=delta_target,
                                eps=eps, delta_cert=delta, **config_kwargs)
            return cfg, cert
        beta /= 2.0
    raise ConfigError("no feasible (beta, gamma) pair above beta = 1e-8")


def _kappa_from_shares(G) -> np.ndarray:
    data = np.where(G.data > 0, G.data, np.inf)
    return 1.0 / np.minimum.reduceat(data, G.indptr[:-1])


def pathfol_run(instance: MarketInstance, config: PathFolConfig, p0, callback=None):
    """Run the path-following driver from p0 > 0; returns (p, SolveTrace).

    The anchor gradient grad phi(p0) is frozen at k = 0; only the metric
    H~(p_k) of its dual norm changes.  In dr1 mode the surrogate's spectral
    error is estimated by power iteration each iteration and the run falls
    back to PCG when the implied relative error exceeds the certified delta.
    """
    config.validate(instance)
    p = np.asarray(p0, dtype=float).copy()
    if np.any(p <= 0):
        raise ConfigError("p0 must be strictly positive")
    C = config.c_phi if config.c_phi is not None else PRACTICAL_C_PHI
    delta_cert = config.delta_cert if config.delta_cert is not None else config.delta_target
    mode = config.hessian_mode
    try:
        g0u = market_state(instance, p).grad  # frozen anchor
    except OracleError as exc:
        return p, SolveTrace(status=STATUS_NUMFAIL, extras={"error": str(exc)})
    t = 1.0
    degrees = instance.degrees() if not instance.is_linear else None
    trace = SolveTrace(extras={"C_phi": C, "beta": config.beta, "gamma": config.gamma_step,
                               "safeguards": 0, "centering_warnings": 0,
                               "mode_switch_k": None, "t_zero_k": None})
    iterates = [p.copy()] if config.keep_iterates else None
    status = STATUS_MAXITERS
    for k in range(config.max_iters):
        tic = time.perf_counter()
        try:
            state = market_state(instance, p)
            op = hes.assemble_from_state(state, instance, hes.EXACT)
        except (OracleError, FloatingPointError) as exc:
            trace.extras["error"] = str(exc)
            status = STATUS_NUMFAIL
            break
        if mode == "dr1":
            eps_h = hes.diff_norm_estimate(op, iters=10, seed=k)
            kappa = np.minimum(_kappa_from_shares(op.G), config.kappa_cap)
            delta_est = eps_h / float(np.min(degrees[state.uncon] / kappa))
            if delta_est > delta_cert:
                mode = "pcg"
                trace.extras["mode_switch_k"] = k
        g = state.grad
        gs = p * g
        solver = _StepSolver(op, mode, config.eps_k)
        lam = solver.dual_norm(gs)
        resid_vec = p * (g - t * g0u)
        nbhd = solver.dual_norm(resid_vec)
        if nbhd > config.beta / C * (1.0 + 1e-9):
            trace.extras["centering_warnings"] += 1
        row = TraceRow(k=k, homotopy=t, grad_inf=float(np.max(np.abs(g))),
                       grad_l2=float(np.linalg.norm(g)), nbhd_resid=nbhd, decrement=lam)
        trace.rows.append(row)
        if row.grad_inf <= config.eps:
            status = STATUS_CONVERGED
            break
        if callback is not None:
            stop = callback(k, p)
            if stop:
                status = stop if isinstance(stop, str) else STATUS_CONVERGED
                break
        if t > 0.0:
            g0_norm = solver.dual_norm(p * g0u)
            t_new = max(t - config.gamma_step / (C * g0_norm), 0.0)
        else:
            t_new = 0.0
        if t_new == 0.0 and t > 0.0:
            trace.extras["t_zero_k"] = k
        rhs = -(p * (g - t_new * g0u))
        try:
            d, pcg_iters = solver.solve(MU_FLOOR, rhs)
        except (FloatingPointError, scipy.linalg.LinAlgError) as exc:
            trace.extras["error"] = str(exc)
            status = STATUS_NUMFAIL
            break
        if not np.all(np.isfinite(d)):
            trace.extras["error"] = "non-finite Newton step"
            status = STATUS_NUMFAIL
            break
        d, clipped = _apply_safeguard(d, config.step_safeguard_eta)
        if clipped:
            trace.extras["safeguards"] += 1
        p = p * (1.0 + d)
        t = t_new
        row.step_norm = float(np.linalg.norm(d))
        row.pcg_iters = pcg_iters
        row.wall_ms = (time.perf_counter() - tic) * 1e3
        if iterates is not None:
            iterates.append(p.copy())
    trace.status = status
    if iterates is not None:
        trace.extras["iterates"] = iterates
    return p, trace


# ---------------------------------------------------------------------------
# equilibrium certificate


def equilibrium_certificate(instance: MarketInstance, p, eps: float | None = None) -> dict:
    """Residual report at p: gradient norms, clearing error, budgets, KKT."""
    p = np.asarray(p, dtype=float)
    state = market_state(instance, p)
    report = {
        "n": instance.n,
        "m": instance.m,
        "grad_inf": float(np.max(np.abs(state.grad))),
        "grad_l2": float(np.linalg.norm(state.grad)),
        "clearing_inf": float(np.max(np.abs(state.demand - 1.0))),
    }
    if state.kind_class == "linear":
        spends = state.linear_x @ p
        report["budget_residual_max"] = float(
            np.max(np.abs(spends - instance.budgets) / instance.budgets))
        report["kkt_residual_max"] = state.kkt_resid
        sigma = instance.utilities[0].sigma
        report["sigma"] = sigma
        if eps is not None:
            bound = (eps + sigma * instance.n) / (1.0 + sigma * instance.n)
            report["remark1_bound"] = bound
            report["clearing_within_bound"] = bool(report["clearing_inf"] <= bound)
    else:
        resid = 0.0
        if state.uncon:
            counts = np.diff(state.G.indptr)
            spends = np.add.reduceat(state.G.data, state.G.indptr[:-1])  # sum gamma = spend/w
            resid = float(np.max(np.abs(spends - 1.0)))
        kkt = 0.0
        for i, resp in state.con_responses.items():
            u = instance.utilities[i]
            resid = max(resid, abs(resp.spend - instance.budgets[i]) / instance.budgets[i])
            A = instance.constraints[i]
            kkt = max(kkt, float(np.max(np.abs(A @ resp.x))) if A.shape[0] else 0.0)
        report["budget_residual_max"] = resid
        report["kkt_residual_max"] = kkt
    if eps is not None:
        report["eps"] = eps
        report["converged"] = bool(report["grad_inf"] <= eps)
    return report
