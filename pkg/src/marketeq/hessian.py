"""Scaled Hessian operator, DR1 surrogate, preconditioner, and linear solvers.

The exact operator H(p) = P grad^2 phi(p) P is kept matrix-free as
    H v = D * v - G^T (s * (G v)) + linear/constrained extras,
with G the bidding-share matrix, D = G^T a, a_i = w_i/(1-r_i) and
s_i = w_i r_i/(1-r_i).  The DR1 surrogate collapses the rank-one sum to a
single outer product of xi = sum_i omega_i gamma_i, whose inverse is an
O(n) Sherman-Morrison solve.  The optimal diagonal preconditioner is the
row sum k_c = H 1 = sum_i w_i gamma_i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .market import MarketInstance
from .oracle import (
    MarketState,
    linear_barrier_hessian_block,
    constrained_dual_hessian,
    market_state,
)

EXACT = "exact"
DR1 = "dr1"

DENSE_LIMIT = 512  # dense materialization is a test path, never the big-n path
OMEGA_DROP_REL = 1e-14
KC_FLOOR = 1e-300


class SingularUpdateError(RuntimeError):
    """The Sherman-Morrison denominator vanished (mu too small for DR1)."""


@dataclass
class DiagonalPreconditioner:
    """Jacobi preconditioner from the Hessian row sums, k_c = H 1."""

    k_c: np.ndarray

    def apply_inv(self, v: np.ndarray) -> np.ndarray:
        return v / self.k_c


@dataclass
class ScaledHessianOp:
    """H(p) = P grad^2 phi(p) P as diagonal + rank-one pieces per player."""

    n: int
    mode: str = EXACT
    # additive-family batch: share rows, diag weights a, rank-one weights s
    G: sp.csr_matrix | None = None
    a: np.ndarray | None = None
    s: np.ndarray | None = None
    # general per-player DR1 pieces: (diag vector, coefficient, vector)
    general: list = field(default_factory=list)
    # dense blocks (constrained players)
    dense_blocks: list = field(default_factory=list)
    # DR1 surrogate data
    dr1_diag: np.ndarray | None = None
    dr1_omega: float = 0.0
    dr1_xi: np.ndarray | None = None
    dr1_active: bool = False

    # -- products ----------------------------------------------------------

    def exact_matvec(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n)
        if self.G is not None:
            # dr1_diag doubles as the exact diagonal: both equal G^T a
            out += self.dr1_diag * v - self.G.T @ (self.s * (self.G @ v))
        for adiag, coef, vec in self.general:
            out += adiag * v - coef * (vec @ v) * vec
        for blk in self.dense_blocks:
            out += blk @ v
        return out

    def dr1_matvec(self, v: np.ndarray) -> np.ndarray:
        out = self.dr1_diag * v
        if self.dr1_active:
            out -= self.dr1_omega * (self.dr1_xi @ v) * self.dr1_xi
        return out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.dr1_matvec(v) if self.mode == DR1 else self.exact_matvec(v)

    def diff_matvec(self, v: np.ndarray) -> np.ndarray:
        """(H_dr1 - H_exact) v; diagonals cancel, only rank-one terms remain."""
        out = np.zeros(self.n)
        if self.G is not None:
            out += self.G.T @ (self.s * (self.G @ v))
        for _, coef, vec in self.general:
            out += coef * (vec @ v) * vec
        if self.dr1_active:
            out -= self.dr1_omega * (self.dr1_xi @ v) * self.dr1_xi
        return out

    def row_sums(self) -> np.ndarray:
        return self.matvec(np.ones(self.n))

    def dense(self) -> np.ndarray:
        if self.n > DENSE_LIMIT:
            raise ValueError(f"dense materialization capped at n={DENSE_LIMIT}")
        if self.mode == DR1:
            H = np.diag(self.dr1_diag.copy())
            if self.dr1_active:
                H -= self.dr1_omega * np.outer(self.dr1_xi, self.dr1_xi)
            return H
        H = np.zeros((self.n, self.n))
        if self.G is not None:
            H += np.diag(self.G.T @ self.a)
            H -= np.asarray((self.G.T @ sp.diags(self.s) @ self.G).todense())
        for adiag, coef, vec in self.general:
            H += np.diag(adiag) - coef * np.outer(vec, vec)
        for blk in self.dense_blocks:
            H += blk
        return H

    def preconditioner(self) -> DiagonalPreconditioner:
        return DiagonalPreconditioner(np.maximum(self.row_sums(), KC_FLOOR))


def assemble_from_state(state: MarketState, instance: MarketInstance, mode: str = EXACT) -> ScaledHessianOp:
    op = ScaledHessianOp(n=instance.n, mode=mode)
    w = instance.budgets
    if state.kind_class == "linear":
        if mode == DR1:
            raise ValueError("DR1 surrogate is defined for the additive family only")
        for i in range(instance.m):
            op.general.append(
                linear_barrier_hessian_block(
                    state.p, instance.utilities[i].dense(instance.n),
                    instance.utilities[i].sigma, float(w[i]), state.linear_gammas[i],
                )
            )
        return op

    uncon = state.uncon
    if uncon:
        r = instance.r_exponents()[uncon]
        wu = w[uncon]
        op.G = state.G
        op.a = wu / (1.0 - r)
        op.s = wu * r / (1.0 - r)
        op.dr1_diag = op.G.T @ op.a
        omega = float(op.s.sum())
        op.dr1_omega = omega
        if abs(omega) >= OMEGA_DROP_REL * float(np.abs(op.s).sum()):
            op.dr1_xi = (op.G.T @ op.s) / omega
            op.dr1_active = True
    if state.con_responses:
        if mode == DR1:
            raise ValueError("DR1 surrogate is defined for unconstrained players only")
        for i in state.con_responses:
            u = instance.utilities[i]
            d = u.k_exponent * u.r_exponent
            M = constrained_dual_hessian(instance, state.p, i)
            scaled = (float(w[i]) / d) * (state.p[:, None] * M * state.p[None, :])
            op.dense_blocks.append(scaled)
    return op


def assemble(instance: MarketInstance, p, mode: str = EXACT) -> ScaledHessianOp:
    """Build the scaled Hessian operator at p (exact or DR1 surrogate)."""
    return assemble_from_state(market_state(instance, p), instance, mode)


def preconditioner(instance: MarketInstance, p) -> DiagonalPreconditioner:
    return assemble(instance, p, EXACT).preconditioner()


def dr1_solve(op: ScaledHessianOp, mu: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (diag(D) + mu I - Omega xi xi^T) d = rhs in O(n) via Sherman-Morrison."""
    if op.dr1_diag is None:
        raise ValueError("operator carries no DR1 data")
    M = op.dr1_diag + mu
    if np.any(M <= 0):
        raise SingularUpdateError("diagonal term not positive; increase mu")
    d = rhs / M
    if op.dr1_active:
        Minv_xi = op.dr1_xi / M
        denom = 1.0 / op.dr1_omega - float(op.dr1_xi @ Minv_xi)
        scale = max(abs(1.0 / op.dr1_omega), abs(float(op.dr1_xi @ Minv_xi)))
        if abs(denom) <= 1e-12 * scale:
            raise SingularUpdateError("rank-one update singular; fall back to PCG")
        d = d + Minv_xi * (float(op.dr1_xi @ d) / denom)
    return d


def pcg_solve(op, g_diag, rhs: np.ndarray, eps_k: float,
              precond: DiagonalPreconditioner | None = None,
              max_iters: int | None = None):
    """Conjugate gradient on (H + diag(g_diag)) d = rhs.

    When a preconditioner is supplied, its k_c (= H 1) is combined with the
    regularizer's diagonal so the solver preconditions with the row sums of
    the full system matrix.  Terminates when the unpreconditioned residual
    satisfies ||(H+G)d - rhs|| <= eps_k * max(||d||, 1e-30), or after n
    iterations (CG is exact in exact arithmetic).  Returns (d, iterations).
    """
    n = len(rhs)
    g_diag = np.broadcast_to(np.asarray(g_diag, dtype=float), (n,))
    matvec = lambda v: op.matvec(v) + g_diag * v
    m_diag = precond.k_c + g_diag if precond is not None else None
    d = np.zeros(n)
    res = rhs.copy()
    if np.linalg.norm(res) == 0.0:
        return d, 0
    z = res / m_diag if precond else res
    direction = z.copy()
    rz = float(res @ z)
    limit = max_iters if max_iters is not None else n
    iters = 0
    for _ in range(limit):
        Ad = matvec(direction)
        dAd = float(direction @ Ad)
        if not np.isfinite(dAd) or dAd <= 0:
            raise FloatingPointError("indefinite or non-finite operator in CG")
        alpha = rz / dAd
        d += alpha * direction
        res -= alpha * Ad
        iters += 1
        if np.linalg.norm(res) <= eps_k * max(np.linalg.norm(d), 1e-30):
            break
        z = res / m_diag if precond else res
        rz_new = float(res @ z)
        direction = z + (rz_new / rz) * direction
        rz = rz_new
        if not np.all(np.isfinite(direction)):
            raise FloatingPointError("non-finite CG direction")
    return d, iters


def dense_solve(op: ScaledHessianOp, g_diag, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve of (H + diag(g_diag)) d = rhs for desk-scale n."""
    H = op.dense()
    A = H + np.diag(np.broadcast_to(np.asarray(g_diag, dtype=float), (op.n,)))
    c, low = scipy.linalg.cho_factor(A, check_finite=False)
    return scipy.linalg.cho_solve((c, low), rhs, check_finite=False)


def diff_norm_estimate(op: ScaledHessianOp, iters: int = 30, seed: int = 0) -> float:
    """Power-iteration estimate of ||H_dr1 - H_exact|| (symmetric operator)."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        Av = op.diff_matvec(v)
        nrm = np.linalg.norm(Av)
        if nrm == 0.0:
            return 0.0
        lam = nrm
        v = Av / nrm
    return float(abs(v @ op.diff_matvec(v)))
