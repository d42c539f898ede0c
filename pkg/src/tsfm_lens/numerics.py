"""Dense float64 linear algebra and a portable counter-based RNG.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
functions here validate shape and finiteness on the way in so that every
consumer can rely on clean inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import NumericError, ShapeError, UndefinedInputError

EPS = np.finfo(np.float64).eps

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12


def as_matrix(a, name="matrix"):
    """Return ``a`` as a C-contiguous float64 2-D array, checking finiteness."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


@lru_cache(maxsize=64)
def _round_robin(n: int):
    """Circle-method schedule: n-1 rounds of n/2 disjoint column pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array([players[i] for i in range(n // 2)], dtype=np.intp)
        q = np.array([players[n - 1 - i] for i in range(n // 2)], dtype=np.intp)
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        rounds.append((lo, hi))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _complete_columns(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns not flagged ``good`` by an orthonormal completion."""
    m, r = u.shape
    basis = [u[:, j] for j in range(r) if good[j]]
    out = u.copy()
    e = 0
    for j in range(r):
        if good[j]:
            continue
        while True:
            v = np.zeros(m)
            v[e % m] = 1.0
            e += 1
            for b in basis:
                v -= (b @ v) * b
            for b in basis:
                v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                break
            if e > 2 * m + r:
                raise NumericError("failed to complete orthonormal basis")
        basis.append(v)
        out[:, j] = v
    return out


def svd(a, max_sweeps: int = SVD_MAX_SWEEPS, tol: float = SVD_TOL) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Column pairs are visited in a round-robin schedule so that each round
    applies n/2 disjoint rotations at once. A pair is rotated while
    ``|<u_p, u_q>| > tol * |u_p| |u_q|``.

    Returns ``SvdResult(u, s, vt)`` with ``u`` of shape (m, r), ``s``
    descending of length r and ``vt`` of shape (r, n), r = min(m, n).

    Raises
    ------
    NumericError
        If the rotations have not converged after ``max_sweeps`` sweeps.
    """
    a = as_matrix(a)
    m, n = a.shape
    transposed = m < n
    work = a.T.copy() if transposed else a.copy()
    rows, cols = work.shape
    npad = cols + (cols % 2)
    u = np.zeros((rows, npad))
    u[:, :cols] = work
    v = np.eye(npad)

    fro2 = float(np.sum(work * work))
    negligible = (max(rows, cols) * EPS) ** 2 * fro2

    if npad >= 2:
        schedule = _round_robin(npad)
        for sweep in range(max_sweeps):
            rotated = False
            for p_all, q_all in schedule:
                up = u[:, p_all]
                uq = u[:, q_all]
                alpha = np.einsum("ij,ij->j", up, up)
                beta = np.einsum("ij,ij->j", uq, uq)
                gamma = np.einsum("ij,ij->j", up, uq)
                active = (
                    (np.abs(gamma) > tol * np.sqrt(alpha * beta))
                    & (alpha > negligible)
                    & (beta > negligible)
                )
                if not active.any():
                    continue
                rotated = True
                p, q = p_all[active], q_all[active]
                al, be, ga = alpha[active], beta[active], gamma[active]
                zeta = (be - al) / (2.0 * ga)
                sign = np.where(zeta >= 0.0, 1.0, -1.0)
                t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up, uq = u[:, p], u[:, q]
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
                vp, vq = v[:, p], v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
            if not rotated:
                break
        else:
            raise NumericError(f"Jacobi SVD did not converge after {max_sweeps} sweeps")

    u = u[:, :cols]
    v = v[:cols, :cols]
    sv = np.sqrt(np.einsum("ij,ij->j", u, u))
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    u = u[:, order]
    v = v[:, order]
    smax = sv[0] if sv.size else 0.0
    good = sv > max(rows, cols) * EPS * smax if smax > 0 else np.zeros(cols, bool)
    safe = np.where(good, sv, 1.0)
    u = u / safe
    if not good.all():
        u = _complete_columns(u, good)
    if transposed:
        return SvdResult(u=v, s=sv, vt=u.T.copy())
    return SvdResult(u=u, s=sv, vt=v.T.copy())


def spectral_norm(a) -> float:
    return float(svd(a).s[0])


def stable_rank(a) -> float:
    """``||A||_F^2 / ||A||_2^2``; raises ``UndefinedInputError`` for the zero matrix."""
    a = as_matrix(a)
    fro2 = float(np.sum(a * a))
    if fro2 == 0.0:
        raise UndefinedInputError("stable rank of the zero matrix is undefined")
    top = float(svd(a).s[0])
    return fro2 / (top * top)


def softmax_rows(scores, beta: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``beta * scores`` with max subtraction."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    z = beta * as_matrix(scores, "scores")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# --- RNG -------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """Counter-based SplitMix64 stream.

    Word ``i`` of the stream (i = 0, 1, ...) is
    ``splitmix64_finalize(seed + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)``.
    Uniforms use the top 53 bits; normals use Box-Muller on consecutive
    uniform pairs ``(u1, u2)`` giving ``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)``.
    The rule is pure integer arithmetic, so streams agree across platforms.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            x = np.uint64(self.seed) + idx * _GAMMA
            return _splitmix64(x)

    def uniform(self, size=None) -> np.ndarray:
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, size=None, mean: float = 0.0, std: float = 1.0):
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        th = 2.0 * np.pi * u[:, 1]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(th)
        z[1::2] = r * np.sin(th)
        z = mean + std * z[:n]
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)`` via ``floor(u * (high - low))``."""
        if high <= low:
            raise ValueError("high must exceed low")
        u = self.uniform(size)
        out = low + np.floor(u * (high - low)).astype(np.int64)
        return out if size is not None else int(out)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(np.floor(u[k] * (i + 1)))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
