"""Attention as Nadaraya-Watson kernel regression and a spectral concentration bound.

Scores follow the convention ``l_ij = <q_i, M k_j>`` with ``M = U S V^T``;
truncated scores keep the top ``r`` singular modes. Everything the bound
needs (argmax, margins, separations, norms, spectral tail) is measured from
the realized instance, never assumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, SvdResult, as_matrix, svd

STRICT = 1.0 - 1e-9
LOG_TOL = 1e-9
ENERGY_FRACTION = 0.9


def _lse(z):
    m = np.max(z)
    if not np.isfinite(m):
        return m
    return float(m + np.log(np.sum(np.exp(z - m))))


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


# --- Nadaraya-Watson view ----------------------------------------------------------

def nw_weights(q, keys, tau: float) -> np.ndarray:
    """Gaussian NW weights ``w_i ~ exp(-||q - k_i||^2 / (2 tau))``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    k = as_matrix(keys, "keys")
    d2 = np.sum((k - q[None, :]) ** 2, axis=1)
    return _softmax(-d2 / (2.0 * tau))


def attention_weights(q, keys, d_head: int) -> np.ndarray:
    """Softmax of ``<q, k_i> / sqrt(d_head)``."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    return _softmax(as_matrix(keys, "keys") @ q / math.sqrt(d_head))


def attention_vs_nw(q, keys, d_head: int) -> float:
    """Max abs deviation between softmax attention and NW weights with tau = sqrt(d_head).

    The two agree exactly when all keys share a norm; otherwise the deviation
    is simply reported.
    """
    return float(np.max(np.abs(attention_weights(q, keys, d_head) - nw_weights(q, keys, math.sqrt(d_head)))))


# --- spectral head ---------------------------------------------------------------

def energy_rank(s, fraction: float = ENERGY_FRACTION) -> int:
    """Smallest r whose top-r squared singular values hold ``fraction`` of the energy."""
    e = np.asarray(s, dtype=np.float64) ** 2
    total = e.sum()
    if total == 0:
        return 1
    c = np.cumsum(e) / total
    return int(np.searchsorted(c, fraction - 1e-15) + 1)


@dataclass
class SpectralHead:
    m: np.ndarray
    svd: SvdResult
    stable_rank: float
    r: int

    @classmethod
    def from_matrix(cls, m, r: int | None = None) -> "SpectralHead":
        m = as_matrix(m, "M")
        if m.shape[0] != m.shape[1]:
            raise ValueError("M must be square")
        dec = svd(m)
        r = energy_rank(dec.s) if r is None else int(r)
        if not 1 <= r <= m.shape[0]:
            raise ValueError(f"r must lie in [1, {m.shape[0]}]")
        sr = float(np.sum(m * m) / dec.s[0] ** 2) if dec.s[0] > 0 else math.nan
        return cls(m, dec, sr, r)

    @classmethod
    def from_projections(cls, w_q, w_k, r: int | None = None) -> "SpectralHead":
        """``M = W_Q W_K^T / sqrt(d_head)`` with projections of shape [d_model, d_head]."""
        w_q, w_k = as_matrix(w_q, "W_Q"), as_matrix(w_k, "W_K")
        return cls.from_matrix(w_q @ w_k.T / math.sqrt(w_q.shape[1]), r)

    @property
    def dim(self) -> int:
        return self.m.shape[0]

    def tail(self, r: int | None = None) -> float:
        """``rho = sum_{i > r} sigma_i^2``."""
        r = self.r if r is None else r
        return float(np.sum(self.svd.s[r:] ** 2))

    def with_rank(self, r: int) -> "SpectralHead":
        return SpectralHead(self.m, self.svd, self.stable_rank, int(r))


def scores(head: SpectralHead, queries, keys) -> np.ndarray:
    """Full scores ``<q_i, M k_j>``, shape [H, C]."""
    return as_matrix(queries, "queries") @ head.m @ as_matrix(keys, "keys").T


def truncated_scores(head: SpectralHead, queries, keys, r: int | None = None) -> np.ndarray:
    r = head.r if r is None else r
    u, s, vt = head.svd.u[:, :r], head.svd.s[:r], head.svd.vt[:r]
    qt = as_matrix(queries, "queries") @ u
    kt = as_matrix(keys, "keys") @ vt.T
    return (qt * s) @ kt.T


def tilt_factorization(head: SpectralHead, h_q, h_keys, beta: float = 1.0) -> np.ndarray:
    """Attention weights rebuilt as a tilted Gaussian kernel in the singular bases.

    With ``q~ = U^T h_q`` and ``k~_i = V^T h_i`` the log weight is
    ``beta (||k~_i||_S^2 / 2 - (q~ - k~_i)^T S (q~ - k~_i) / 2)`` with the full S.
    This differs from ``beta <h_q, M h_i>`` by a per-query constant only.
    """
    s = head.svd.s
    qt = head.svd.u.T @ np.asarray(h_q, dtype=np.float64).reshape(-1)
    kt = as_matrix(h_keys, "keys") @ head.svd.vt.T
    diff = qt[None, :] - kt
    logw = 0.5 * np.sum(s * kt * kt, axis=1) - 0.5 * np.sum(s * diff * diff, axis=1)
    return _softmax(beta * logw)


def direct_weights(head: SpectralHead, h_q, h_keys, beta: float = 1.0) -> np.ndarray:
    h_q = np.asarray(h_q, dtype=np.float64).reshape(-1)
    return _softmax(beta * (as_matrix(h_keys, "keys") @ (head.m.T @ h_q)))


# --- concentration bound -------------------------------------------------------

@dataclass
class BoundInstance:
    head: SpectralHead
    queries: np.ndarray  # [H, n]
    keys: np.ndarray  # [C, n]
    beta: float = 1.0
    seed: int | None = None
    family: str = ""

    @property
    def n_keys(self) -> int:
        return self.keys.shape[0]


@dataclass
class QueryMeasure:
    j_star: int
    j_dagger: int
    gamma_r: float
    gamma: float
    d: float
    a: float
    weighted_norm: float
    failed: tuple


def measure(instance: BoundInstance, r: int | None = None) -> tuple:
    """Per-query realized bound quantities and the global ``(rho, M_q, M_k)``."""
    head = instance.head
    r = head.r if r is None else r
    lr = truncated_scores(head, instance.queries, instance.keys, r)
    full = scores(head, instance.queries, instance.keys)
    rho = head.tail(r)
    m_q = float(np.max(np.linalg.norm(instance.queries, axis=1)))
    m_k = float(np.max(np.linalg.norm(instance.keys, axis=1)))
    tail_term = 2.0 * math.sqrt(rho) * m_q * m_k
    vr = head.svd.vt[:r]
    kt = instance.keys @ vr.T
    qt = (instance.queries @ head.svd.u[:, :r]) * head.svd.s[:r]
    out = []
    for i in range(lr.shape[0]):
        row = lr[i]
        order = np.argsort(-row, kind="stable")
        js, jd = int(order[0]), int(order[1])
        failed = []
        if row[js] == row[jd]:
            failed.append("unique_argmax")
        gamma_r = float(row[js] - row[jd])
        gamma = float(full[i, js] - np.max(np.delete(full[i], js)))
        sep = float(np.linalg.norm(kt[js] - kt[jd]))
        wn = float(np.linalg.norm(qt[i]))
        cos = float(qt[i] @ (kt[js] - kt[jd]) / (wn * sep)) if wn > 0 and sep > 0 else 0.0
        if not gamma_r > 0:
            failed.append("score_margin")
        if not gamma_r > tail_term:
            failed.append("margin_vs_tail")
        if not sep > 0:
            failed.append("key_separation")
        if not cos > 0:
            failed.append("alignment_separation")
        out.append(QueryMeasure(js, jd, gamma_r, gamma, sep * STRICT, cos * STRICT, wn, tuple(failed)))
    return out, rho, m_q, m_k


@dataclass
class BoundResult:
    seed: int | None
    r: int
    assumptions_ok: bool
    failed: list
    holds: bool | None
    log_lhs: list = field(default_factory=list)
    log_rhs_generic: list = field(default_factory=list)
    log_rhs_truncated: list = field(default_factory=list)

    @property
    def worst(self) -> int:
        slack = np.asarray(self.log_rhs_truncated) - np.asarray(self.log_lhs)
        return int(np.argmin(slack))

    @property
    def slack(self) -> float:
        """Smallest ``log rhs_truncated - log lhs`` over queries."""
        if not self.log_lhs:
            return math.nan
        return float(np.min(np.asarray(self.log_rhs_truncated) - np.asarray(self.log_lhs)))

    def to_dict(self) -> dict:
        if not self.assumptions_ok:
            return {"seed": self.seed, "r": self.r, "lhs": None, "rhs_generic": None,
                    "rhs_truncated": None, "slack": None, "assumptions_ok": False,
                    "failed": self.failed}
        w = self.worst
        return {
            "seed": self.seed, "r": self.r,
            "lhs": math.exp(self.log_lhs[w]),
            "rhs_generic": math.exp(min(self.log_rhs_generic[w], 700.0)),
            "rhs_truncated": math.exp(min(self.log_rhs_truncated[w], 700.0)),
            "slack": self.slack, "assumptions_ok": True, "failed": [],
            "holds": bool(self.holds),
        }


def log_residual_mass(row_scores, j: int, beta: float) -> float:
    """``log(1 - softmax(beta * scores)_j)`` computed stably."""
    z = beta * np.asarray(row_scores, dtype=np.float64)
    return _lse(np.delete(z, j)) - _lse(z)


def generic_bound_holds(row_scores, beta: float) -> bool:
    """Check ``1 - A_j* <= (C - 1) exp(-beta gamma)`` with j* the full-score argmax."""
    row = np.asarray(row_scores, dtype=np.float64)
    js = int(np.argmax(row))
    gamma = float(row[js] - np.max(np.delete(row, js)))
    lhs = log_residual_mass(row, js, beta)
    return lhs <= math.log(row.size - 1) - beta * gamma + LOG_TOL


def verify_bound(instance: BoundInstance, r: int | None = None) -> BoundResult:
    """Check the generic and truncated-spectrum concentration bounds per query.

    Assumptions are verified first; when any fails the result names the
    failures and carries no verdict.
    """
    r = instance.head.r if r is None else r
    per_query, rho, m_q, m_k = measure(instance, r)
    failed = sorted({f"query{i}:{f}" for i, q in enumerate(per_query) for f in q.failed})
    if failed:
        return BoundResult(instance.seed, r, False, failed, None)
    full = scores(instance.head, instance.queries, instance.keys)
    beta = instance.beta
    log_c = math.log(instance.n_keys - 1)
    tail_term = 2.0 * math.sqrt(rho) * m_q * m_k
    lhs, rg, rt = [], [], []
    for i, q in enumerate(per_query):
        lhs.append(log_residual_mass(full[i], q.j_star, beta))
        rg.append(log_c - beta * q.gamma)
        rt.append(log_c - beta * (q.a * q.d * q.weighted_norm - tail_term))
    holds = all(l <= g + LOG_TOL and l <= t + LOG_TOL for l, g, t in zip(lhs, rg, rt))
    return BoundResult(instance.seed, r, True, [], holds, lhs, rg, rt)


@dataclass
class SlopeResult:
    betas: np.ndarray
    slope_lhs: float
    slope_generic: float
    slope_truncated: float

    @property
    def ok(self) -> bool:
        tol = 1e-6 * max(abs(self.slope_generic), abs(self.slope_truncated), 1e-300)
        return self.slope_lhs <= self.slope_generic + tol and self.slope_lhs <= self.slope_truncated + tol


def beta_slopes(instance: BoundInstance, query: int | None = None, r: int | None = None,
                n_points: int = 20, span: float = 10.0) -> SlopeResult:
    """Least-squares slopes of log(lhs) and log(rhs) against beta on a large-beta grid.

    The grid starts at ``(ln(C - 1) + 30) / gamma`` where the residual mass is
    already far below one.
    """
    r = instance.head.r if r is None else r
    per_query, rho, m_q, m_k = measure(instance, r)
    if any(q.failed for q in per_query):
        raise ValueError("instance does not satisfy the bound assumptions")
    res0 = verify_bound(instance, r)
    i = res0.worst if query is None else query
    q = per_query[i]
    beta0 = (math.log(instance.n_keys - 1) + 30.0) / q.gamma
    betas = np.geomspace(beta0, span * beta0, n_points)
    row = scores(instance.head, instance.queries[i:i + 1], instance.keys)[0]
    lhs = np.array([log_residual_mass(row, q.j_star, b) for b in betas])
    tail_term = 2.0 * math.sqrt(rho) * m_q * m_k
    log_c = math.log(instance.n_keys - 1)
    rg = log_c - betas * q.gamma
    rt = log_c - betas * (q.a * q.d * q.weighted_norm - tail_term)
    fit = lambda y: float(np.polyfit(betas, y, 1)[0])
    return SlopeResult(betas, fit(lhs), fit(rg), fit(rt))


# --- instance generators ----------------------------------------------------------

def _random_orthogonal(rng: Rng, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal((n, n)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _place_queries(rng, head, keys, n_queries, r, pull):
    """Queries whose top-r weighted features point at a chosen key plus noise."""
    u, s = head.svd.u[:, :r], head.svd.s[:r]
    kt = keys @ head.svd.vt[:r].T
    qs = []
    for _ in range(n_queries):
        j = rng.integers(0, keys.shape[0])
        target = pull * kt[j] / max(np.linalg.norm(kt[j]), 1e-300) + rng.normal(r, std=0.3)
        qs.append(u @ (target / s))
    return np.array(qs)


def low_rank_instance(seed: int, max_tries: int = 1000) -> BoundInstance:
    """rho = 0 family: M = W_Q W_K^T / sqrt(d_head) has rank d_head < d_model, r = d_head."""
    rng = Rng(seed)
    for _ in range(max_tries):
        d_model = rng.integers(6, 17)
        d_head = rng.integers(2, d_model)
        n_keys = rng.integers(2, 33)
        head = SpectralHead.from_projections(rng.normal((d_model, d_head)), rng.normal((d_model, d_head)),
                                             r=d_head)
        keys = rng.normal((n_keys, d_model))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        queries = _place_queries(rng, head, keys, rng.integers(1, 5), d_head, 1.0 + 3.0 * rng.uniform())
        inst = BoundInstance(head, queries, keys, float(0.5 + 4.5 * rng.uniform()), seed, "rank_deficient")
        per_query, _, _, _ = measure(inst)
        if not any(q.failed for q in per_query):
            return inst
    raise RuntimeError(f"no assumption-satisfying instance for seed {seed}")


def tail_instance(seed: int, max_tries: int = 1000) -> BoundInstance:
    """rho > 0 family: full-rank M with a decaying spectrum and a random r < n."""
    rng = Rng(seed)
    for _ in range(max_tries):
        n = rng.integers(4, 17)
        decay = 0.4 + 1.2 * rng.uniform()
        sig = 3.0 * np.exp(-decay * np.arange(n))
        m = _random_orthogonal(rng, n) @ np.diag(sig) @ _random_orthogonal(rng, n).T
        r = rng.integers(1, n)
        head = SpectralHead.from_matrix(m, r=r)
        n_keys = rng.integers(2, 33)
        keys = rng.normal((n_keys, n))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        queries = _place_queries(rng, head, keys, rng.integers(1, 5), r, 2.0 + 4.0 * rng.uniform())
        inst = BoundInstance(head, queries, keys, float(0.5 + 4.5 * rng.uniform()), seed, "spectral_tail")
        per_query, _, _, _ = measure(inst)
        if not any(q.failed for q in per_query):
            return inst
    raise RuntimeError(f"no assumption-satisfying instance for seed {seed}")


def symmetric_instance() -> BoundInstance:
    """Two keys mirrored about the query direction: zero margin, assumptions fail."""
    head = SpectralHead.from_matrix(np.eye(2), r=2)
    keys = np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2.0)
    return BoundInstance(head, np.array([[1.0, 0.0]]), keys, 1.0, None, "symmetric")


def random_head(rng: Rng, d: int | None = None) -> SpectralHead:
    d = rng.integers(2, 33) if d is None else d
    return SpectralHead.from_matrix(rng.normal((d, d)) / math.sqrt(d))
