"""Best-response oracles and the calculus built from them.

Everything the solvers consume is reconstructed from players' best
responses: demand aggregates into the potential gradient, and the bidding
vectors (money shares) gamma_i = P x_i / w_i assemble the scaled Hessian.
CES and power-form additive utilities share one closed form, evaluated in
the log domain so extreme exponents cannot overflow.  Linear-barrier
players reduce to a one-dimensional root-find; homogeneously constrained
players run a damped feasible Newton on their KKT system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .market import ADDITIVE, CES, LINEAR_BARRIER, MarketInstance, UtilitySpec


class OracleError(RuntimeError):
    """Numerical breakdown inside a best-response computation."""


class RootBracketError(OracleError):
    """The psi root could not be bracketed; carries sampled psi values."""


class FeasibleStartError(OracleError):
    """No strictly feasible interior start for a constrained player."""


class NewtonStagnationError(OracleError):
    """Constrained Newton failed to reach the target residual."""


class ConditioningError(OracleError):
    """A W^{-1} A^T is numerically singular."""


@dataclass
class BestResponse:
    """One player's demand at prices p.

    ``gamma`` is the bidding vector (distribution of spent money; for the
    linear-barrier kind it is the shifted vector X c / <c, x>).
    ``log_utility`` is the attained log-objective of the player's LUMP,
    which for CES/additive players equals log u(x).
    """

    x: np.ndarray
    gamma: np.ndarray
    utility: float
    log_utility: float
    spend: float


@dataclass
class PlayerHessianBlock:
    """Diagonal-plus-rank-one block of the scaled Hessian for one player."""

    r: float
    weight_diag: float  # w / (1 - r)
    weight_rank1: float  # w * r / (1 - r)
    gamma: np.ndarray

    def dense(self) -> np.ndarray:
        return self.weight_diag * np.diag(self.gamma) - self.weight_rank1 * np.outer(
            self.gamma, self.gamma
        )


@dataclass
class PotentialConstants:
    """Smoothness data for the potential: exact T, heuristic kappa-based C."""

    T_phi: float
    C_phi: float
    kappa: np.ndarray


# ---------------------------------------------------------------------------
# closed-form responses for the power family


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def ces_best_response(p, c, rho: float, w: float) -> BestResponse:
    """Walrasian demand for u(x) = <c, x^rho>^(1/rho), rho in (-inf,0)u(0,1).

    theta_j = c_j^{1/(1-rho)} p_j^{-rho/(1-rho)} gives the bidding shares;
    demand is x_j = w * gamma_j / p_j.  Evaluated with a max-subtracted
    softmax of the log theta so powers never overflow.
    """
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    n = len(p)
    supp = np.flatnonzero(c > 0)
    if supp.size == 0:
        raise OracleError("player has no positive coefficient")
    a = 1.0 / (1.0 - rho)
    logits = a * np.log(c[supp]) - rho * a * np.log(p[supp])
    if not np.all(np.isfinite(logits)):
        raise OracleError("overflow in log-domain power evaluation")
    gamma = np.zeros(n)
    gamma[supp] = _softmax(logits)
    x = w * gamma / p
    # log u via log(sum c x^rho) / rho restricted to the support
    with np.errstate(divide="ignore"):
        terms = np.log(c[supp]) + rho * np.log(x[supp])
    log_u = float(_logsumexp(terms) / rho)
    return BestResponse(x, gamma, math.exp(log_u) if abs(log_u) < 700 else math.inf, log_u, float(p @ x))


def additive_best_response(p, c, k: float, r: float, w: float) -> BestResponse:
    """Demand for the power-form additive family u(x) = <c, x^r>^k.

    The outer power does not move the argmax, so this is the CES closed form
    with rho := r; only the attained utility differs.
    """
    br = ces_best_response(p, c, r, w)
    supp = np.flatnonzero(np.asarray(c, dtype=float) > 0)
    terms = np.log(np.asarray(c, dtype=float)[supp]) + r * np.log(br.x[supp])
    log_u = float(k * _logsumexp(terms))
    return BestResponse(br.x, br.gamma, math.exp(log_u) if abs(log_u) < 700 else math.inf, log_u, br.spend)


def _logsumexp(v: np.ndarray) -> float:
    mx = v.max()
    return float(mx + np.log(np.exp(v - mx).sum()))


# ---------------------------------------------------------------------------
# linear utilities with a log barrier


def linear_barrier_best_response(p, c, sigma: float, w: float):
    """Demand for log<c,x> + sigma*<log x, 1> under the budget constraint.

    Returns (response, lam, u) where lam = (1 + sigma*n)/w is the budget
    multiplier and u = <c, x> is the root of
    psi(u) = sum_j sigma*c_j / (lam*p_j - c_j/u) - u.
    psi is strictly decreasing on (u_lo, inf) with u_lo the largest pole, so
    a bracketed root-find cannot miss.
    """
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    n = len(p)
    lam = (1.0 + sigma * n) / w
    supp = np.flatnonzero(c > 0)
    if supp.size == 0:
        raise OracleError("player has no positive coefficient")
    cs, ps = c[supp], p[supp]
    u_lo = float(np.max(cs / (lam * ps)))

    def psi(u):
        return float(np.sum(sigma * cs / (lam * ps - cs / u)) - u)

    lo = u_lo * (1.0 + 1e-8)
    f_lo = psi(lo)
    shrink = 0
    while f_lo < 0.0 and shrink < 200:
        lo = u_lo + (lo - u_lo) * 0.5
        f_lo = psi(lo)
        shrink += 1
    hi = max(lo * 2.0, u_lo + w)
    f_hi = psi(hi)
    grow = 0
    while f_hi > 0.0 and grow < 200:
        hi *= 2.0
        f_hi = psi(hi)
        grow += 1
    if f_lo < 0.0 or f_hi > 0.0:
        raise RootBracketError(
            f"psi bracket failed: psi({lo})={f_lo}, psi({hi})={f_hi}"
        )
    u = brentq(psi, lo, hi, xtol=1e-300, rtol=8.9e-16, maxiter=200)
    # Newton polish in extended precision; see _linear_batch for why
    ld = np.longdouble
    cs_l, ps_l = cs.astype(ld), ps.astype(ld)
    lam_l, sig_l, u_l = ld(lam), ld(sigma), ld(u)
    for _ in range(6):
        denom = lam_l * ps_l - cs_l / u_l
        pu = (sig_l * cs_l / denom).sum() - u_l
        dpsi = -((sig_l * cs_l**2 / (u_l * denom) ** 2).sum()) - ld(1.0)
        u_new = u_l - pu / dpsi
        if not np.isfinite(float(u_new)) or float(u_new) <= u_lo:
            break
        u_l = u_new
    u = float(u_l)

    x = (sig_l / (lam_l * p.astype(ld) - c.astype(ld) / u_l)).astype(float)
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise OracleError("linear-barrier demand left the positive orthant")
    gamma = (1.0 + sigma * n) * (x * p) / w - sigma
    u_val = float(c @ x)
    log_obj = float(np.log(u_val) + sigma * np.sum(np.log(x)))
    resp = BestResponse(x, gamma, u_val, log_obj, float(p @ x))
    return resp, lam, u


def linear_barrier_kkt_residual(p, c, sigma: float, w: float, x: np.ndarray) -> float:
    """Max-norm residual of the stationarity condition c/<c,x> + sigma/x = lam*p."""
    lam = (1.0 + sigma * len(p)) / w
    res = c / float(c @ x) + sigma / x - lam * np.asarray(p, dtype=float)
    return float(np.max(np.abs(res)))


def linear_barrier_hessian_block(p, c, sigma: float, w: float, gamma: np.ndarray):
    """Scaled dual-Hessian block for a linear-barrier player.

    Differentiating the stationarity system gives the player's contribution
    to P grad^2(phi) P as
        (w/sigma) * [ diag((gamma+sigma)^2) - v v^T / (sigma + |gamma|^2) ],
    with v = (gamma + sigma) * gamma.  Returned as (diag, coef, vec) so the
    operator can apply it matrix-free.
    """
    g = np.asarray(gamma, dtype=float)
    adiag = (w / sigma) * (g + sigma) ** 2
    vec = (g + sigma) * g
    coef = w / (sigma * (sigma + float(g @ g)))
    return adiag, coef, vec


# ---------------------------------------------------------------------------
# homogeneously constrained players


def _theta_shares(x, c, r):
    t = c * x**r
    S = float(t.sum())
    return t / S, S


def v_value(x, c, k: float, r: float) -> float:
    _, S = _theta_shares(x, c, r)
    return -k * math.log(S)


def v_grad(x, c, k: float, r: float) -> np.ndarray:
    gamma, _ = _theta_shares(x, c, r)
    return -(k * r) * gamma / x


def v_hess(x, c, k: float, r: float) -> np.ndarray:
    gamma, _ = _theta_shares(x, c, r)
    d = k * r
    xinv_g = gamma / x
    return d * (1.0 - r) * np.diag(xinv_g / x) + d * r * np.outer(xinv_g, xinv_g)


def _feasible_start(p, w, A, x_guess, tol=1e-9, iters=200):
    """Project a positive guess onto {Ax=0, <p,x>=w}, clipping back inside."""
    n = len(p)
    B = np.vstack([A, p[None, :]]) if A.shape[0] else p[None, :].copy()
    b = np.zeros(B.shape[0])
    b[-1] = w
    BBt = B @ B.T
    x = x_guess.copy()
    scale = float(np.median(x[x > 0])) if np.any(x > 0) else 1.0
    floor = 1e-8 * scale
    for _ in range(iters):
        resid = B @ x - b
        x = x - B.T @ np.linalg.solve(BBt, resid)
        if np.min(x) >= floor:
            break
        x = np.maximum(x, floor)
    resid = np.linalg.norm(B @ x - b)
    if np.min(x) <= 0 or resid > tol * (1.0 + abs(w)):
        return None
    return x


def constrained_best_response(p, c, k: float, r: float, w: float, A: np.ndarray,
                              tol_stat: float = 1e-10, max_newton: int = 100):
    """Equality-constrained LUMP via damped feasible Newton.

    Solves max log u(x) s.t. A x = 0, <p, x> = w, x > 0 for the power-form
    additive family.  The start is the unconstrained closed form projected
    onto the constraint plane with a clip-and-reproject loop; steps use the
    KKT system with a 0.99 fraction-to-boundary cap and Armijo backtracking
    on v = -log u.  Returns (response, y, lam): constraint multipliers y and
    budget multiplier lam (equal to d/w at the solution).
    """
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, len(p))
    if np.any(c <= 0):
        raise OracleError("constrained oracle needs strictly positive coefficients")
    x0 = ces_best_response(p, c, r, w).x
    x = _feasible_start(p, w, A, x0)
    if x is None:
        x = _feasible_start(p, w, A, np.full(len(p), w / float(p.sum())))
    if x is None:
        raise FeasibleStartError("no strictly feasible interior start found")

    B = np.vstack([A, p[None, :]])
    nB = B.shape[0]
    nu = np.zeros(nB)
    for _ in range(max_newton):
        g = v_grad(x, c, k, r)
        H = v_hess(x, c, k, r)
        KKT = np.zeros((len(p) + nB, len(p) + nB))
        KKT[: len(p), : len(p)] = H
        KKT[: len(p), len(p):] = B.T
        KKT[len(p):, : len(p)] = B
        rhs = np.concatenate([-g, np.zeros(nB)])
        sol = np.linalg.solve(KKT, rhs)
        dx, nu = sol[: len(p)], sol[len(p):]
        stat = np.linalg.norm(g + B.T @ nu, ord=np.inf)
        decr2 = float(dx @ (H @ dx))
        if stat <= tol_stat * (1.0 + np.linalg.norm(g, ord=np.inf)) and decr2 <= tol_stat:
            break
        alpha = 1.0
        neg = dx < 0
        if np.any(neg):
            alpha = min(1.0, 0.99 * float(np.min(-x[neg] / dx[neg])))
        v0 = v_value(x, c, k, r)
        slope = float(g @ dx)
        while alpha > 1e-14:
            x_try = x + alpha * dx
            if np.all(x_try > 0):
                if v_value(x_try, c, k, r) <= v0 + 1e-4 * alpha * slope:
                    break
            alpha *= 0.5
        else:
            raise NewtonStagnationError(f"line search failed at stationarity {stat:.3e}")
        x = x + alpha * dx
    else:
        raise NewtonStagnationError(f"no convergence in {max_newton} Newton steps; stationarity {stat:.3e}")

    gamma, S = _theta_shares(x, c, r)
    log_u = k * math.log(S)
    y, lam = nu[:-1], float(nu[-1])
    return (
        BestResponse(x, gamma, math.exp(log_u) if abs(log_u) < 700 else math.inf, log_u, float(p @ x)),
        y,
        lam,
    )


def constrained_dual_hessian(instance: MarketInstance, p, i: int) -> np.ndarray:
    """Dual Hessian of f_i for a constrained player:
    (d^2/w^2) (W^{-1} - W^{-1} A^T (A W^{-1} A^T)^{-1} A W^{-1}), W = hess v(x(p)).
    """
    u = instance.utilities[i]
    A = instance.constraints.get(i, np.zeros((0, instance.n)))
    w = float(instance.budgets[i])
    k, r = u.k_exponent, u.r_exponent
    d = k * r
    c = u.dense(instance.n)
    resp, _, _ = constrained_best_response(np.asarray(p, float), c, k, r, w, A)
    W = v_hess(resp.x, c, k, r)
    Winv = np.linalg.inv(W)
    if A.shape[0] == 0:
        return (d * d / (w * w)) * Winv
    AWA = A @ Winv @ A.T
    cond = np.linalg.cond(AWA)
    if not np.isfinite(cond) or cond > 1e13:
        raise ConditioningError(f"A W^-1 A^T condition number {cond:.3e}")
    corr = Winv @ A.T @ np.linalg.solve(AWA, A @ Winv)
    return (d * d / (w * w)) * (Winv - corr)


# ---------------------------------------------------------------------------
# batched evaluation across players


def _row_softmax(logits: np.ndarray, indptr: np.ndarray):
    """Row-wise softmax over CSR-packed data; returns (shares, logsumexp per row)."""
    starts = indptr[:-1]
    counts = np.diff(indptr)
    mx = np.maximum.reduceat(logits, starts)
    e = np.exp(logits - np.repeat(mx, counts))
    sums = np.add.reduceat(e, starts)
    return e / np.repeat(sums, counts), mx + np.log(sums)


def bid_shares(instance: MarketInstance, p, players=None):
    """Bidding-share matrix G (csr, rows of gamma) for additive-family players.

    Returns (G, log_S) where log_S[i] is logsumexp of the dual theta row,
    from which the attained log-utility is d_i log w_i + k_i (1-r_i) log_S_i.
    """
    C = instance.coeff_csr()
    rows_of = instance.nnz_row_index()
    logc = instance.log_coeff_data()
    r = instance.r_exponents()
    a = 1.0 / (1.0 - r)
    b = -r * a
    logp = np.log(np.asarray(p, dtype=float))
    logits = a[rows_of] * logc + b[rows_of] * logp[C.indices]
    if players is not None:
        mask = np.zeros(instance.m, dtype=bool)
        mask[players] = True
        sel = mask[rows_of]
        sub = sp.csr_matrix(
            (logits[sel], C.indices[sel], np.concatenate([[0], np.cumsum(np.diff(C.indptr)[mask])])),
            shape=(int(mask.sum()), instance.n),
        )
        gdata, logS = _row_softmax(sub.data, sub.indptr)
        G = sp.csr_matrix((gdata, sub.indices, sub.indptr), shape=sub.shape)
        return G, logS
    gdata, logS = _row_softmax(logits, C.indptr)
    G = sp.csr_matrix((gdata, C.indices.copy(), C.indptr.copy()), shape=C.shape)
    return G, logS


def _linear_batch(instance: MarketInstance, p: np.ndarray):
    """All linear-barrier responses at once: vectorized bracketed bisection.

    Solves every player's psi root simultaneously on arrays (psi is strictly
    decreasing on (u_lo, inf)), then a few vectorized Newton polish steps.
    Returns (X, gammas, value, kkt_resid) with dense (m, n) allocations.
    """
    m, n = instance.m, instance.n
    w = instance.budgets
    sig = np.array([u.sigma for u in instance.utilities])
    lam = (1.0 + sig * n) / w
    C = np.zeros((m, n))
    for i, u in enumerate(instance.utilities):
        C[i, u.idx] = u.val
    ratio = np.where(C > 0, C / (lam[:, None] * p[None, :]), 0.0)
    u_lo = ratio.max(axis=1)

    def psi(u):
        # sum_j sigma*c/(lam*p - c/u) - u, rows vectorized; u > u_lo
        denom = lam[:, None] * p[None, :] - C / u[:, None]
        return (sig[:, None] * np.where(C > 0, C / denom, 0.0)).sum(axis=1) - u

    lo = u_lo * (1.0 + 1e-8)
    for _ in range(200):
        bad = psi(lo) < 0.0
        if not bad.any():
            break
        lo[bad] = u_lo[bad] + (lo[bad] - u_lo[bad]) * 0.5
    hi = np.maximum(lo * 2.0, u_lo + w)
    for _ in range(200):
        grow = psi(hi) > 0.0
        if not grow.any():
            break
        hi[grow] *= 2.0
    if (psi(lo) < 0.0).any() or (psi(hi) > 0.0).any():
        raise RootBracketError("vectorized psi bracket failed")
    for _ in range(110):
        mid = 0.5 * (lo + hi)
        pos = psi(mid) > 0.0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    u = 0.5 * (lo + hi)

    # Newton polish in extended precision: the root is ill-conditioned in u
    # when sigma is tiny (denominators cancel at eps/sigma), but the demand
    # built from an accurate u is perfectly well-conditioned, so a few
    # longdouble steps buy (D.1) residuals ~1e-12 at sigma = eps/n scale.
    ld = np.longdouble
    C_l, p_l, lam_l, sig_l = C.astype(ld), p.astype(ld), lam.astype(ld), sig.astype(ld)
    u = u.astype(ld)
    u_lo_l = u_lo.astype(ld)
    mask = C_l > 0
    for _ in range(6):
        denom = lam_l[:, None] * p_l[None, :] - C_l / u[:, None]
        pu = (sig_l[:, None] * np.where(mask, C_l / denom, 0.0)).sum(axis=1) - u
        dpsi = -(sig_l[:, None] * np.where(mask, C_l**2 / (u[:, None] * denom) ** 2, 0.0)).sum(axis=1) - 1.0
        u_new = u - pu / dpsi
        ok = u_new > u_lo_l
        u = np.where(ok, u_new, u)

    X_l = sig_l[:, None] / (lam_l[:, None] * p_l[None, :] - C_l / u[:, None])
    X = X_l.astype(float)
    if np.any(X <= 0) or not np.all(np.isfinite(X)):
        raise OracleError("linear-barrier demand left the positive orthant")
    gammas = (1.0 + sig[:, None] * n) * X * p[None, :] / w[:, None] - sig[:, None]
    uval = (C * X).sum(axis=1)
    value = float(p.sum() + np.sum(w * (np.log(uval) + sig * np.log(X).sum(axis=1))))
    kkt = np.abs(C / uval[:, None] + sig[:, None] / X - lam[:, None] * p[None, :])
    return X, gammas, value, float(kkt.max())


@dataclass
class MarketState:
    """Everything the solvers need at one price vector."""

    p: np.ndarray
    kind_class: str  # "additive" or "linear"
    grad: np.ndarray
    demand: np.ndarray
    value: float
    G: sp.csr_matrix | None = None
    log_S: np.ndarray | None = None
    uncon: list = field(default_factory=list)
    con_responses: dict = field(default_factory=dict)
    linear_gammas: np.ndarray | None = None
    linear_x: np.ndarray | None = None
    kkt_resid: float = 0.0


def market_state(instance: MarketInstance, p) -> MarketState:
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise OracleError("prices must stay strictly positive and finite")
    w = instance.budgets
    if instance.is_linear:
        X, gammas, value, worst = _linear_batch(instance, p)
        demand = X.sum(axis=0)
        sig_n = instance.utilities[0].sigma * instance.n
        grad = 1.0 - (1.0 + sig_n) * demand
        return MarketState(p, "linear", grad, demand, value,
                           linear_gammas=gammas, linear_x=X, kkt_resid=worst)

    uncon = instance.unconstrained_players()
    con = instance.constrained_players()
    demand = np.zeros(instance.n)
    value = float(p.sum())
    G = None
    logS = None
    if uncon:
        G, logS = bid_shares(instance, p, players=uncon if con else None)
        wu = w[uncon]
        ru = instance.r_exponents()[uncon]
        ku = np.array([instance.utilities[i].k_exponent for i in uncon])
        du = ku * ru
        counts = np.diff(G.indptr)
        xdata = G.data * np.repeat(wu, counts) / p[G.indices]
        demand += np.bincount(G.indices, weights=xdata, minlength=instance.n)
        value += float(np.sum(wu * np.log(wu))) + float(np.sum((wu / du) * ku * (1.0 - ru) * logS))
    con_responses = {}
    for i in con:
        u = instance.utilities[i]
        resp, y, lam = constrained_best_response(
            p, u.dense(instance.n), u.k_exponent, u.r_exponent, float(w[i]),
            instance.constraints[i],
        )
        con_responses[i] = resp
        demand += resp.x
        value += (float(w[i]) / (u.k_exponent * u.r_exponent)) * resp.log_utility
    if not np.all(np.isfinite(demand)):
        raise OracleError("demand overflow (a price collapsed to zero)")
    grad = 1.0 - demand
    return MarketState(p, "additive", grad, demand, value, G=G, log_S=logS,
                       uncon=uncon, con_responses=con_responses)


def potential_value(instance: MarketInstance, p) -> float:
    """phi(p) = <p,1> + sum_i (w_i/d_i) log u_i(x_i(p)) (linear: w_i f_i)."""
    return market_state(instance, p).value


def potential_gradient(instance: MarketInstance, p) -> np.ndarray:
    """grad phi = 1 - sum_i x_i(p); linear markets scale demand by (1+sigma*n)."""
    return market_state(instance, p).grad


def best_response(instance: MarketInstance, i: int, p) -> BestResponse:
    """Single-player dispatcher (serial path; the batch uses bid_shares)."""
    u = instance.utilities[i]
    w = float(instance.budgets[i])
    p = np.asarray(p, dtype=float)
    if i in instance.constraints:
        resp, _, _ = constrained_best_response(
            p, u.dense(instance.n), u.k_exponent, u.r_exponent, w, instance.constraints[i]
        )
        return resp
    if u.kind == CES:
        return ces_best_response(p, u.dense(instance.n), u.rho, w)
    if u.kind == ADDITIVE:
        return additive_best_response(p, u.dense(instance.n), u.k, u.r, w)
    resp, _, _ = linear_barrier_best_response(p, u.dense(instance.n), u.sigma, w)
    return resp


def player_hessian_blocks(instance: MarketInstance, p) -> list[PlayerHessianBlock]:
    """DR1 blocks of H(p) for a market of unconstrained CES/additive players."""
    if instance.constraints or not instance.kinds <= {CES, ADDITIVE}:
        raise ValueError("blocks are defined for unconstrained CES/additive players")
    G, _ = bid_shares(instance, p)
    r = instance.r_exponents()
    w = instance.budgets
    blocks = []
    dense_G = np.asarray(G.todense())
    for i in range(instance.m):
        blocks.append(
            PlayerHessianBlock(
                r=float(r[i]),
                weight_diag=float(w[i] / (1.0 - r[i])),
                weight_rank1=float(w[i] * r[i] / (1.0 - r[i])),
                gamma=dense_G[i],
            )
        )
    return blocks


def response_jacobian(p, gamma, r: float, w: float) -> np.ndarray:
    """Jacobian of one player's demand: -(w/(1-r)) P^-1 (Gamma - r g g^T) P^-1."""
    p = np.asarray(p, dtype=float)
    g = np.asarray(gamma, dtype=float)
    M = np.diag(g) - r * np.outer(g, g)
    return -(w / (1.0 - r)) * (M / p[None, :]) / p[:, None]


def potential_constants(instance: MarketInstance, gamma_samples, kappa_cap: float = 1e4) -> PotentialConstants:
    """Exact SLC constant T_phi plus the kappa-estimated self-concordance C_phi.

    kappa_i is estimated as the largest inverse bidding share seen on the
    player's active set across the supplied sample matrices, clipped at
    ``kappa_cap``; C_phi takes the max over players (self-concordance
    composes by max, not sum).
    """
    w = instance.budgets
    if instance.is_linear:
        sig = np.array([u.sigma for u in instance.utilities])
        T_f = 2.0 * (1.0 + sig) ** 3 / sig**3
        # the linear-market potential is <p,1> + sum_i w_i f_i, so the SLC
        # weight of player i is w_i itself
        T_phi = float(np.sum(w * T_f))
        C_v = (2.0 + 2.0 * sig) / sig**1.5
        kappa = np.full(instance.m, np.nan)
        C_phi = float(np.max(C_v / np.sqrt(w)))
        return PotentialConstants(T_phi, C_phi, kappa)

    r = instance.r_exponents()
    d = instance.degrees()
    T_phi = float(np.sum(w * np.maximum(6.0 / (1.0 - r) ** 2, 2.0)))
    kappa = np.zeros(instance.m)
    for G in gamma_samples:
        dataset = np.where(G.data > 0, G.data, np.inf)
        mins = np.minimum.reduceat(dataset, G.indptr[:-1])
        kappa = np.maximum(kappa, 1.0 / mins)
    kappa = np.minimum(kappa, kappa_cap)
    C_per = kappa**3 / np.sqrt(w) / np.sqrt(d) * np.maximum(2.0, 6.0 * r**2 - 6.0 * r + 2.0)
    return PotentialConstants(T_phi, float(np.max(C_per)), kappa)
