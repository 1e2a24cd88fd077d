"""Dense symmetric eigensolvers, SPD solves and SVD.

Everything works in float64 on small dense matrices (a few hundred rows at
most). The symmetric eigensolver is a cyclic Jacobi iteration; the
generalized problem is reduced to it by whitening on the range of the metric.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, FactorizationError, PreconditionError

SYM_TOL = 1e-12
JACOBI_TOL = 1e-12
MAX_SWEEPS = 100
RANGE_TOL = 1e-10


@dataclass(frozen=True)
class EigenPairs:
    values: np.ndarray   # descending
    vectors: np.ndarray  # columns

    def __len__(self):
        return len(self.values)


def as_matrix(m) -> np.ndarray:
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise PreconditionError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise PreconditionError("matrix has non-finite entries")
    return a


def _check_symmetric(a):
    if a.shape[0] != a.shape[1]:
        raise PreconditionError(f"matrix is not square: {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYM_TOL * scale:
        raise PreconditionError(f"matrix is not symmetric (max asymmetry {asym:.3e})")


def _fix_signs(vecs):
    # largest-magnitude entry of each column made positive, for determinism
    if vecs.size == 0:
        return vecs
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _off_norm(a):
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair once (tournament order)."""
    players = list(range(n + (n % 2)))
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eig(m, tol=JACOBI_TOL, max_sweeps=MAX_SWEEPS) -> EigenPairs:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied in tournament order, one round of disjoint pairs
    at a time. An entry is rotated away while it exceeds ``eps`` relative to
    the geometric mean of its diagonal entries, which keeps small eigenvalues
    of graded positive definite matrices accurate; the iteration is accepted
    once no entry qualifies, or once the off-diagonal Frobenius norm is below
    ``tol`` times the input norm when the sweep cap is reached.
    """
    a = as_matrix(m)
    _check_symmetric(a)
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    scale = float(np.linalg.norm(a))
    eps = np.finfo(float).eps
    floor = 1e-300 + eps * eps * scale
    if n > 1 and scale > 0.0:
        rounds = _round_robin(n)
        for _ in range(max_sweeps):
            rotated = False
            for p, q in rounds:
                apq = a[p, q]
                app = a[p, p]
                aqq = a[q, q]
                big = (np.abs(apq) > eps * np.sqrt(np.abs(app * aqq))) & (np.abs(apq) > floor)
                if not big.any():
                    continue
                rotated = True
                p, q, apq, app, aqq = p[big], q[big], apq[big], app[big], aqq[big]
                theta = (aqq - app) / (2.0 * apq)
                with np.errstate(over="ignore"):
                    t = 1.0 / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(np.isfinite(theta), t, 0.0)
                t = np.where(theta < 0.0, -t, t)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c[:, None] * ap - s[:, None] * aq
                a[q, :] = s[:, None] * ap + c[:, None] * aq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
            if not rotated:
                break
        else:
            off = _off_norm(a)
            if off > tol * scale:
                raise ConvergenceError(
                    f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal {off:.3e})"
                )
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return EigenPairs(values[order], _fix_signs(v[:, order]))


def cholesky(m) -> np.ndarray:
    """Lower Cholesky factor; raises FactorizationError naming the bad pivot."""
    a = as_matrix(m)
    _check_symmetric(a)
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - low[j, :j] @ low[j, :j]
        if not d > 0.0:
            raise FactorizationError(j, float(d))
        low[j, j] = np.sqrt(d)
        if j + 1 < n:
            low[j + 1:, j] = (a[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / low[j, j]
    return low


def cho_solve(low, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    n = low.shape[0]
    y = np.zeros_like(b)
    for i in range(n):
        y[i] = (b[i] - low[i, :i] @ y[:i]) / low[i, i]
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - low[i + 1:, i] @ x[i + 1:]) / low[i, i]
    return x


def spd_solve(m, b) -> np.ndarray:
    """Solve ``m x = b`` for symmetric positive definite ``m``."""
    low = cholesky(m)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != low.shape[0]:
        raise PreconditionError(f"rhs length {b.shape[0]} != matrix size {low.shape[0]}")
    return cho_solve(low, b)


def _range_basis(h):
    eig = sym_eig(h)
    top = eig.values[0] if len(eig) else 0.0
    if top <= 0.0:
        return eig.vectors[:, :0], eig.values[:0], eig.vectors
    keep = eig.values > RANGE_TOL * top
    return eig.vectors[:, keep], eig.values[keep], eig.vectors[:, ~keep]


def _pinv_psd(m):
    if m.size == 0:
        return m
    eig = sym_eig(m)
    top = eig.values[0]
    if top <= 0.0:
        return np.zeros_like(m)
    keep = eig.values > RANGE_TOL * top
    vk = eig.vectors[:, keep]
    return (vk / eig.values[keep]) @ vk.T


def gen_eig(s, h) -> EigenPairs:
    """Generalized eigenpairs ``S q = rho H q`` on the range of ``H``.

    Returns ``rank(H)`` pairs normalized so that ``q_i^T H q_j = delta_ij``.
    When ``H`` is singular, the kernel component of each ``q`` is chosen to
    satisfy the kernel block of the equation (``S`` restricted to ker(H) is
    eliminated by a Schur complement), so ``S q = rho H q`` holds exactly
    rather than only after projection.
    """
    s = as_matrix(s)
    h = as_matrix(h)
    _check_symmetric(s)
    _check_symmetric(h)
    if s.shape != h.shape:
        raise PreconditionError(f"shape mismatch {s.shape} vs {h.shape}")
    s = 0.5 * (s + s.T)
    ur, wr, un = _range_basis(h)
    r = ur.shape[1]
    if r == 0:
        return EigenPairs(np.zeros(0), np.zeros((s.shape[0], 0)))
    s_rr = ur.T @ s @ ur
    if un.shape[1]:
        s_rn = ur.T @ s @ un
        s_nn = un.T @ s @ un
        lift = -_pinv_psd(0.5 * (s_nn + s_nn.T)) @ s_rn.T
        schur = s_rr + s_rn @ lift
    else:
        lift = None
        schur = s_rr
    white = 1.0 / np.sqrt(wr)
    m = white[:, None] * schur * white[None, :]
    inner = sym_eig(0.5 * (m + m.T))
    x = white[:, None] * inner.vectors
    q = ur @ x
    if lift is not None:
        q = q + un @ (lift @ x)
    return EigenPairs(inner.values, q)


def svd_topk(m, k):
    """Top-``k`` singular triplets, descending: (sigma, U_k, V_k)."""
    a = as_matrix(m)
    if not 0 <= k <= min(a.shape):
        raise PreconditionError(f"k={k} outside [0, {min(a.shape)}]")
    u, sig, vt = np.linalg.svd(a, full_matrices=False)
    return sig[:k], u[:, :k], vt[:k].T
