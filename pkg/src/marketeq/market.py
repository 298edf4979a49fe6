"""Market instances: domain types, validation, generation, and ingestion.

A market has ``n`` divisible goods in unit supply and ``m`` players with
fixed budgets.  Each player carries a utility specification over the goods;
three families are supported:

* ``ces``            -- u(x) = (sum_j c_j x_j^rho)^(1/rho), rho in (-inf,0)u(0,1)
* ``additive``       -- u(x) = (sum_j c_j x_j^r)^k with (k, r) restricted so
                        that u is concave and the degree d = k*r is positive
* ``linear_barrier`` -- log-utility log<c,x> regularized by sigma*sum_j log x_j
                        (the smoothed stand-in for a linear utility)

Instances serialize to a JSON document::

    {"n": ..., "m": ..., "budgets": [...],
     "utilities": [{"kind": "ces", "param": 0.5, "entries": [[j, c], ...]},
                   {"kind": "additive", "param": {"k": 2.0, "r": 0.4}, ...},
                   {"kind": "linear_barrier", "param": 1e-4, ...}],
     "constraints": {"3": [[...], ...]}}          # optional, player -> rows

Ratings files are CSV with a header row and columns (user_id, item_id,
rating); extra columns are ignored.  Flow-network files list directed edges
as ``u v`` lines, then a line ``terminals:`` followed by ``s t`` pairs, one
per player.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

CES = "ces"
ADDITIVE = "additive"
LINEAR_BARRIER = "linear_barrier"

_KINDS = (CES, ADDITIVE, LINEAR_BARRIER)


class IngestError(ValueError):
    """Raised when a ratings file cannot be ingested; carries line numbers."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class DisconnectedTerminalsError(ValueError):
    """Raised when a flow player's terminal pair has no directed path."""


@dataclass
class UtilitySpec:
    """Per-player utility parameters with a sparse coefficient vector."""

    kind: str
    idx: np.ndarray  # good indices with nonzero coefficient, sorted
    val: np.ndarray  # matching coefficient values
    rho: float | None = None  # ces
    k: float | None = None  # additive
    r: float | None = None  # additive
    sigma: float | None = None  # linear_barrier

    def __post_init__(self):
        self.idx = np.asarray(self.idx, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=float)
        order = np.argsort(self.idx)
        self.idx = self.idx[order]
        self.val = self.val[order]

    @property
    def r_exponent(self) -> float:
        """Inner homogeneity exponent (rho for CES, r for additive)."""
        if self.kind == CES:
            return float(self.rho)
        if self.kind == ADDITIVE:
            return float(self.r)
        raise ValueError(f"no r exponent for kind {self.kind!r}")

    @property
    def k_exponent(self) -> float:
        if self.kind == CES:
            return 1.0 / float(self.rho)
        if self.kind == ADDITIVE:
            return float(self.k)
        raise ValueError(f"no k exponent for kind {self.kind!r}")

    @property
    def degree(self) -> float:
        """Homogeneity degree d = k*r of the utility (1 for CES)."""
        if self.kind == CES:
            return 1.0
        if self.kind == ADDITIVE:
            return float(self.k) * float(self.r)
        raise ValueError(f"degree of {self.kind!r} depends on n; see instance")

    def dense(self, n: int) -> np.ndarray:
        c = np.zeros(n)
        c[self.idx] = self.val
        return c

    def param_json(self):
        if self.kind == CES:
            return self.rho
        if self.kind == ADDITIVE:
            return {"k": self.k, "r": self.r}
        return self.sigma


def ces_spec(c, rho: float) -> UtilitySpec:
    c = np.asarray(c, dtype=float)
    idx = np.flatnonzero(c)
    return UtilitySpec(CES, idx, c[idx], rho=float(rho))


def additive_spec(c, k: float, r: float) -> UtilitySpec:
    c = np.asarray(c, dtype=float)
    idx = np.flatnonzero(c)
    return UtilitySpec(ADDITIVE, idx, c[idx], k=float(k), r=float(r))


def linear_barrier_spec(c, sigma: float) -> UtilitySpec:
    c = np.asarray(c, dtype=float)
    idx = np.flatnonzero(c)
    return UtilitySpec(LINEAR_BARRIER, idx, c[idx], sigma=float(sigma))


@dataclass
class PriceVector:
    """Strictly positive price vector, the decision variable of the dual."""

    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        if self.p.ndim != 1 or not np.all(self.p > 0) or not np.all(np.isfinite(self.p)):
            raise ValueError("prices must be a finite strictly positive vector")


class MarketInstance:
    """A Fisher market: n goods (unit supply), m budgeted players."""

    def __init__(self, n, m, budgets, utilities, constraints=None):
        self.n = int(n)
        self.m = int(m)
        self.budgets = np.asarray(budgets, dtype=float)
        self.utilities = list(utilities)
        # player index -> homogeneous constraint matrix A_i (rows x n)
        self.constraints: dict[int, np.ndarray] = {
            int(i): np.asarray(A, dtype=float) for i, A in (constraints or {}).items()
        }
        self._csr = None
        self._log_cdata = None
        self._nnz_rows = None

    # -- derived views -----------------------------------------------------

    @property
    def kinds(self) -> set[str]:
        return {u.kind for u in self.utilities}

    @property
    def is_linear(self) -> bool:
        return self.kinds == {LINEAR_BARRIER}

    def constrained_players(self):
        return sorted(self.constraints.keys())

    def unconstrained_players(self):
        return [i for i in range(self.m) if i not in self.constraints]

    def coeff_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            indptr = np.zeros(self.m + 1, dtype=np.int64)
            for i, u in enumerate(self.utilities):
                indptr[i + 1] = indptr[i] + len(u.idx)
            indices = np.concatenate([u.idx for u in self.utilities]) if self.m else np.zeros(0, np.int64)
            data = np.concatenate([u.val for u in self.utilities]) if self.m else np.zeros(0)
            self._csr = sp.csr_matrix((data, indices, indptr), shape=(self.m, self.n))
        return self._csr

    def log_coeff_data(self) -> np.ndarray:
        if self._log_cdata is None:
            self._log_cdata = np.log(self.coeff_csr().data)
        return self._log_cdata

    def nnz_row_index(self) -> np.ndarray:
        """Row (player) index of every stored coefficient, aligned with csr data."""
        if self._nnz_rows is None:
            C = self.coeff_csr()
            counts = np.diff(C.indptr)
            self._nnz_rows = np.repeat(np.arange(self.m, dtype=np.int64), counts)
        return self._nnz_rows

    def r_exponents(self) -> np.ndarray:
        return np.array([u.r_exponent for u in self.utilities])

    def degrees(self) -> np.ndarray:
        if self.is_linear:
            sig = np.array([u.sigma for u in self.utilities])
            return 1.0 + sig * self.n
        return np.array([u.degree for u in self.utilities])

    def total_budget(self) -> float:
        return float(self.budgets.sum())

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        doc = {
            "n": self.n,
            "m": self.m,
            "budgets": self.budgets.tolist(),
            "utilities": [
                {
                    "kind": u.kind,
                    "param": u.param_json(),
                    "entries": [[int(j), float(v)] for j, v in zip(u.idx, u.val)],
                }
                for u in self.utilities
            ],
        }
        if self.constraints:
            doc["constraints"] = {str(i): A.tolist() for i, A in self.constraints.items()}
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "MarketInstance":
        utilities = []
        for rec in doc["utilities"]:
            kind = rec["kind"]
            entries = rec["entries"]
            idx = [e[0] for e in entries]
            val = [e[1] for e in entries]
            param = rec["param"]
            if kind == CES:
                utilities.append(UtilitySpec(CES, idx, val, rho=float(param)))
            elif kind == ADDITIVE:
                utilities.append(UtilitySpec(ADDITIVE, idx, val, k=float(param["k"]), r=float(param["r"])))
            elif kind == LINEAR_BARRIER:
                utilities.append(UtilitySpec(LINEAR_BARRIER, idx, val, sigma=float(param)))
            else:
                raise ValueError(f"unknown utility kind {kind!r}")
        constraints = doc.get("constraints")
        return cls(doc["n"], doc["m"], doc["budgets"], utilities, constraints)


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_instance(instance: MarketInstance, path: str) -> None:
    atomic_write_text(path, json.dumps(instance.to_json_dict(), sort_keys=True))


def load_instance(path: str) -> MarketInstance:
    with open(path, encoding="utf-8") as fh:
        return MarketInstance.from_json_dict(json.load(fh))


# ---------------------------------------------------------------------------
# validation


def _validate_spec(i: int, u: UtilitySpec, n: int, report: list[str]) -> None:
    if u.kind not in _KINDS:
        report.append(f"player {i}: unknown utility kind {u.kind!r}")
        return
    if u.kind == CES:
        if u.rho is None or u.rho == 0.0:
            report.append(f"player {i}: rho must be nonzero")
        elif not (u.rho < 1.0):
            report.append(f"player {i}: rho must lie in (-inf,0) or (0,1)")
    elif u.kind == ADDITIVE:
        k, r = u.k, u.r
        ok = (0.0 < r < 1.0 and 0.0 < k <= 1.0 / r) or (r < 0.0 and 1.0 / r <= k < 0.0)
        if not ok:
            report.append(
                f"player {i}: additive parameters (k={k}, r={r}) violate the "
                "concavity window r in (0,1), k in (0,1/r] or r<0, k in [1/r,0)"
            )
    else:
        if u.sigma is None or not (u.sigma > 0):
            report.append(f"player {i}: sigma must be positive")
    if len(u.idx) == 0:
        report.append(f"player {i}: needs at least one positive coefficient")
    else:
        if np.any(u.val < 0):
            report.append(f"player {i}: coefficients must be nonnegative")
        if not np.any(u.val > 0):
            report.append(f"player {i}: needs at least one positive coefficient")
        if len(u.idx) and (u.idx[0] < 0 or u.idx[-1] >= n):
            report.append(f"player {i}: coefficient index out of range")


def validate(instance: MarketInstance) -> list[str]:
    """Return a list of invariant violations; empty means the instance is valid."""
    report: list[str] = []
    if instance.n < 1 or instance.m < 1:
        report.append("n and m must be at least 1")
        return report
    if len(instance.budgets) != instance.m:
        report.append("budgets length must equal m")
    elif not np.all(instance.budgets > 0):
        report.append("all budgets must be positive")
    if len(instance.utilities) != instance.m:
        report.append("utilities length must equal m")
        return report
    for i, u in enumerate(instance.utilities):
        _validate_spec(i, u, instance.n, report)

    kinds = instance.kinds
    if LINEAR_BARRIER in kinds and kinds != {LINEAR_BARRIER}:
        report.append("linear_barrier players cannot be mixed with other kinds")

    valued = np.zeros(instance.n, dtype=bool)
    for u in instance.utilities:
        mask = u.val > 0
        valued[u.idx[mask]] = True
    unvalued = np.flatnonzero(~valued)
    if unvalued.size:
        report.append(f"goods valued by no player: {unvalued.tolist()}")

    for i, A in instance.constraints.items():
        if i < 0 or i >= instance.m:
            report.append(f"constraint for unknown player {i}")
            continue
        if A.ndim != 2 or A.shape[1] != instance.n:
            report.append(f"player {i}: constraint matrix must have n columns")
            continue
        if A.shape[0] and np.linalg.matrix_rank(A) < A.shape[0]:
            report.append(f"player {i}: constraint matrix is not full row rank")
        u = instance.utilities[i]
        if len(u.idx) != instance.n or not np.all(u.val > 0):
            report.append(
                f"player {i}: constrained players need strictly positive "
                "coefficients on every good (interior solutions)"
            )
    return report


# ---------------------------------------------------------------------------
# synthetic generation


def generate_random(
    n: int,
    m: int,
    tau: float,
    delta: float = 1.0,
    rho: float = 0.5,
    seed: int = 0,
    kind: str = CES,
    sigma: float | None = None,
) -> MarketInstance:
    """Sparse random instance: c = delta * sprand(m, n, tau), budgets on the simplex.

    Any all-zero player row or unvalued good column is repaired by inserting a
    single uniform entry, so every generated instance passes :func:`validate`.
    ``kind`` extends the protocol to linear-barrier markets (same coefficient
    pattern, sigma attached to every player).
    """
    if not (0.0 < tau <= 1.0):
        raise ValueError("tau must lie in (0, 1]")
    if not (delta > 0):
        raise ValueError("delta must be positive")
    if kind == CES and not (rho < 1.0 and rho != 0.0):
        raise ValueError("rho must lie in (-inf,0) or (0,1)")
    if kind == LINEAR_BARRIER and not (sigma and sigma > 0):
        raise ValueError("linear_barrier generation needs sigma > 0")
    if n < 1 or m < 1:
        raise ValueError("n and m must be at least 1")

    rng = np.random.default_rng(seed)
    cols_per_row: list[np.ndarray] = []
    for _ in range(m):
        nz = rng.binomial(n, tau)
        cols_per_row.append(np.sort(rng.choice(n, size=nz, replace=False)))

    # repair empty rows, then unvalued columns, then re-check
    for i in range(m):
        if cols_per_row[i].size == 0:
            cols_per_row[i] = np.array([rng.integers(n)])
    while True:
        valued = np.zeros(n, dtype=bool)
        for cols in cols_per_row:
            valued[cols] = True
        missing = np.flatnonzero(~valued)
        if missing.size == 0:
            break
        for j in missing:
            i = int(rng.integers(m))
            cols_per_row[i] = np.unique(np.append(cols_per_row[i], j))

    utilities = []
    for i in range(m):
        cols = cols_per_row[i]
        vals = (1.0 - rng.random(cols.size)) * delta  # uniform on (0, delta]
        if kind == CES:
            utilities.append(UtilitySpec(CES, cols, vals, rho=float(rho)))
        else:
            utilities.append(UtilitySpec(LINEAR_BARRIER, cols, vals, sigma=float(sigma)))

    w = rng.random(m)
    while np.any(w == 0):
        w[w == 0] = rng.random(int(np.sum(w == 0)))
    w = w / w.sum()
    return MarketInstance(n, m, w, utilities)


# ---------------------------------------------------------------------------
# ratings ingestion


def ingest_ratings(
    path: str,
    max_users: int | None = None,
    max_items: int | None = None,
    rho: float = 0.5,
    scale: str = "raw",
) -> tuple[MarketInstance, dict]:
    """Build a CES instance from a ratings CSV (user_id, item_id, rating).

    Users map to players and items to goods in first-appearance order; users
    or items beyond the limits are dropped, as are players/goods left without
    any rating.  Duplicate (user, item) pairs keep the last occurrence.
    Budgets are uniform and normalized to sum to one.  ``scale`` maps ratings
    to coefficients: "raw" uses the value as-is, "unit" divides by the
    largest rating seen.  Returns the instance and the mapping tables
    ``{"users": [...], "items": [...]}``.
    """
    if scale not in ("raw", "unit"):
        raise ValueError(f"unknown rating scale {scale!r}")
    errors: list[str] = []
    user_order: dict[str, int] = {}
    item_order: dict[str, int] = {}
    ratings: dict[tuple[int, int], float] = {}

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            next(reader)
        except StopIteration:
            raise IngestError(["file is empty (missing header row)"]) from None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                errors.append(f"line {lineno}: expected at least 3 columns, got {len(row)}")
                continue
            user, item, rating_str = row[0].strip(), row[1].strip(), row[2].strip()
            if not user or not item:
                errors.append(f"line {lineno}: empty user or item id")
                continue
            try:
                rating = float(rating_str)
            except ValueError:
                errors.append(f"line {lineno}: rating {rating_str!r} is not a number")
                continue
            if not np.isfinite(rating) or rating < 0:
                errors.append(f"line {lineno}: rating must be finite and nonnegative")
                continue
            if user not in user_order:
                if max_users is not None and len(user_order) >= max_users:
                    continue
                user_order[user] = len(user_order)
            if item not in item_order:
                if max_items is not None and len(item_order) >= max_items:
                    continue
                item_order[item] = len(item_order)
            ratings[(user_order[user], item_order[item])] = rating

    if errors:
        raise IngestError(errors)
    if not ratings:
        raise IngestError(["no usable ratings found"])

    users = sorted(user_order, key=user_order.get)
    items = sorted(item_order, key=item_order.get)

    # drop zero ratings, then goods/players left without support
    per_user: dict[int, dict[int, float]] = {}
    for (ui, ii), val in ratings.items():
        if val > 0:
            per_user.setdefault(ui, {})[ii] = val

    rated_items = sorted({ii for d in per_user.values() for ii in d})
    item_remap = {old: new for new, old in enumerate(rated_items)}
    kept_users = sorted(ui for ui, d in per_user.items() if d)
    if not kept_users or not rated_items:
        raise IngestError(["no usable ratings found"])

    divisor = max(v for d in per_user.values() for v in d.values()) if scale == "unit" else 1.0
    utilities = []
    for ui in kept_users:
        d = per_user[ui]
        cols = np.array([item_remap[ii] for ii in sorted(d)], dtype=np.int64)
        vals = np.array([d[ii] / divisor for ii in sorted(d)])
        utilities.append(UtilitySpec(CES, cols, vals, rho=float(rho)))

    m = len(kept_users)
    n = len(rated_items)
    w = np.full(m, 1.0 / m)
    mappings = {
        "users": [users[ui] for ui in kept_users],
        "items": [items[ii] for ii in rated_items],
    }
    return MarketInstance(n, m, w, utilities), mappings


# ---------------------------------------------------------------------------
# flow-network instances


def flow_constraint_rows(edges, nodes, s, t) -> np.ndarray:
    """Raw balance rows over variables [x_0; x_e, e in edges] for one player.

    Three groups: source balance ``x_0 + inflow(s) - outflow(s) = 0`` (x_0
    enters s like a return edge), sink balance ``-x_0 + inflow(t) -
    outflow(t) = 0``, and conservation ``outflow(v) - inflow(v) = 0`` at
    every other node.  The incidence structure makes the rows linearly
    dependent (rank is at most #nodes - 1), so callers reduce the system
    before storing it.
    """
    n = 1 + len(edges)
    rows = []
    for node in [s, t] + [v for v in nodes if v not in (s, t)]:
        row = np.zeros(n)
        inflow_sign = 1.0 if node in (s, t) else -1.0
        if node == s:
            row[0] = 1.0
        elif node == t:
            row[0] = -1.0
        for e, (u, v) in enumerate(edges):
            if u == node:
                row[1 + e] -= inflow_sign  # outflow
            if v == node:
                row[1 + e] += inflow_sign  # inflow
        rows.append(row)
    return np.array(rows)


def _independent_rows(A: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    keep: list[int] = []
    for i in range(A.shape[0]):
        cand = A[keep + [i]]
        if np.linalg.matrix_rank(cand, tol=tol) == len(keep) + 1:
            keep.append(i)
    return A[keep]


def _has_path(edges, s, t) -> bool:
    adj: dict = {}
    for u, v in edges:
        adj.setdefault(u, []).append(v)
    seen = {s}
    stack = [s]
    while stack:
        u = stack.pop()
        if u == t:
            return True
        for v in adj.get(u, []):
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return False


def build_flow_instance(edges, terminals, rho: float = 0.5, coefficients=None) -> MarketInstance:
    """Market over a flow network: goods are [flow value x_0; edge capacities].

    Each player routes an s_i -> t_i flow; the homogeneous balance equations
    become that player's constraint matrix (reduced to full row rank).
    Coefficients default to all ones so the constrained best response stays
    interior.
    """
    edges = [tuple(e) for e in edges]
    nodes = sorted({u for u, _ in edges} | {v for _, v in edges}, key=str)
    n = 1 + len(edges)
    m = len(terminals)
    if m < 1:
        raise ValueError("need at least one terminal pair")
    utilities = []
    constraints = {}
    for i, (s, t) in enumerate(terminals):
        if s == t:
            raise ValueError(f"player {i}: source equals sink")
        if s not in nodes or t not in nodes:
            raise DisconnectedTerminalsError(f"player {i}: terminal not in graph")
        if not _has_path(edges, s, t):
            raise DisconnectedTerminalsError(f"player {i}: no directed {s}->{t} path")
        raw = flow_constraint_rows(edges, nodes, s, t)
        constraints[i] = _independent_rows(raw)
        c = np.ones(n) if coefficients is None else np.asarray(coefficients, dtype=float)
        utilities.append(ces_spec(c, rho))
    w = np.full(m, 1.0 / m)
    return MarketInstance(n, m, w, utilities, constraints)


def with_barrier_sigma(instance: MarketInstance, sigma: float) -> MarketInstance:
    """Clone a linear-barrier instance with every player's sigma replaced."""
    utilities = [
        UtilitySpec(LINEAR_BARRIER, u.idx.copy(), u.val.copy(), sigma=float(sigma))
        for u in instance.utilities
    ]
    return MarketInstance(instance.n, instance.m, instance.budgets.copy(), utilities)


def parse_flow_file(path: str):
    """Read edge lines ("u v") and terminal pairs after a "terminals:" marker."""
    edges = []
    terminals = []
    section = "edges"
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.lower().startswith("terminals"):
                section = "terminals"
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"malformed line in flow file: {raw!r}")
            if section == "edges":
                edges.append((parts[0], parts[1]))
            else:
                terminals.append((parts[0], parts[1]))
    return edges, terminals
