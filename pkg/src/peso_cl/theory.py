"""Quadratic-risk objects, closed-form proximal minimizers and their certificates.

The certificate functions at the bottom sample random instances, run the
closed forms and report the worst-case error of each identity. They are what
``peso-cl certify`` serializes.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import ParamVector
from .errors import ConvergenceError, PreconditionError, SingularityError
from .linalg import as_matrix, gen_eig, spd_solve, sym_eig
from .proximal import ProximalMetric, kl_local_hessian, log_softmax, softmax, softmax_kl_grad

COMPLEMENTARITY_TOL = 1e-8
CERT_RIDGE = 1e-6


@dataclass
class QuadraticRisk:
    Sigma: np.ndarray
    v_star: np.ndarray
    b: np.ndarray = None

    def __post_init__(self):
        self.Sigma = as_matrix(self.Sigma)
        self.v_star = np.asarray(self.v_star, dtype=np.float64)
        if self.Sigma.shape != (self.v_star.size, self.v_star.size):
            raise PreconditionError("Sigma and v_star dimensions disagree")

    def __call__(self, v):
        d = np.asarray(v) - self.v_star
        return 0.5 * float(d @ self.Sigma @ d)

    def grad(self, v):
        return self.Sigma @ (np.asarray(v) - self.v_star)


def _metric_matrix(metric):
    if isinstance(metric, ProximalMetric):
        return metric.matrix(), float(metric.lam)
    h, lam = metric
    return as_matrix(h), float(lam)


def check_complementarity(sigma, h) -> bool:
    """True iff ker(sigma) and ker(h) meet only at zero."""
    sigma = as_matrix(sigma)
    h = as_matrix(h)
    vals = sym_eig(0.5 * ((sigma + h) + (sigma + h).T)).values
    if vals.size == 0:
        return True
    top = vals[0]
    return bool(top > 0.0 and vals[-1] > COMPLEMENTARITY_TOL * top)


def closed_form_min(risk: QuadraticRisk, metric, v_prev) -> np.ndarray:
    """Unique minimizer of risk(v) + lam/2 |v - v_prev|_H^2."""
    h, lam = _metric_matrix(metric)
    v_prev = np.asarray(v_prev, dtype=np.float64)
    if not check_complementarity(risk.Sigma, lam * h):
        raise SingularityError("Sigma and lam*H share a flat direction; minimizer not unique")
    lhs = risk.Sigma + lam * h
    rhs = risk.Sigma @ risk.v_star + lam * (h @ v_prev)
    return spd_solve(0.5 * (lhs + lhs.T), rhs)


def stationarity_residual(risk, metric, v_prev, v) -> float:
    h, lam = _metric_matrix(metric)
    g = risk.Sigma @ (v - risk.v_star) + lam * h @ (v - np.asarray(v_prev))
    return float(np.max(np.abs(g)))


@dataclass
class InterpolationPair:
    rho: float
    coeff_new: float
    coeff_old: float
    lhs: float
    rhs: float
    abs_err: float


@dataclass
class InterpolationReport:
    lam: float
    pairs: list = field(default_factory=list)

    @property
    def max_abs_err(self):
        return max((p.abs_err for p in self.pairs), default=0.0)

    @property
    def max_rel_err(self):
        return max((p.abs_err / (1.0 + abs(p.lhs)) for p in self.pairs), default=0.0)

    def to_dict(self):
        return {"lambda": self.lam, "max_abs_err": self.max_abs_err,
                "pairs": [asdict(p) for p in self.pairs]}


def verify_interpolation(risk, metric, v_prev, v_min, eig=None) -> InterpolationReport:
    """Check the direction-wise blend along each generalized eigenvector of (Sigma, H)."""
    h, lam = _metric_matrix(metric)
    if eig is None:
        eig = gen_eig(risk.Sigma, h)
    v_prev = np.asarray(v_prev, dtype=np.float64)
    report = InterpolationReport(lam)
    for k in range(len(eig)):
        q = eig.vectors[:, k]
        rho = float(eig.values[k])
        hq = h @ q
        denom = rho + lam
        c_new = rho / denom if denom != 0 else 0.0
        c_old = lam / denom if denom != 0 else 1.0
        lhs = float(hq @ v_min)
        rhs = c_new * float(hq @ risk.v_star) + c_old * float(hq @ v_prev)
        report.pairs.append(InterpolationPair(rho, c_new, c_old, lhs, rhs, abs(lhs - rhs)))
    return report


def descent_vs_closed_form(risk, metric, v_prev, tol=1e-10, max_iter=100_000):
    """Minimize iteratively from ``v_prev`` and compare with the closed form.

    Uses linear conjugate gradients (first-order, exact line search along each
    direction). Returns ``(max deviation, iterations)``.
    """
    h, lam = _metric_matrix(metric)
    v_prev = np.asarray(v_prev, dtype=np.float64)
    target = closed_form_min(risk, (h, lam), v_prev)
    a = risk.Sigma + lam * h
    c = risk.Sigma @ risk.v_star + lam * (h @ v_prev)
    v = v_prev.copy()
    g = a @ v - c
    d = -g
    it = 0
    while np.linalg.norm(g) > tol:
        if it >= max_iter:
            raise ConvergenceError(f"descent did not converge in {max_iter} iterations")
        ad = a @ d
        step = float(g @ g) / float(d @ ad)
        v = v + step * d
        g_new = g + step * ad
        it += 1
        if it % v.size == 0:
            g_new = a @ v - c       # restart to shed rounding drift
            d = -g_new
        else:
            d = -g_new + (float(g_new @ g_new) / float(g @ g)) * d
        g = g_new
    return float(np.max(np.abs(v - target))) if v.size else 0.0, it


def tangent_sigma(features) -> np.ndarray:
    """Empirical second moment of tangent features."""
    phi = np.asarray(features, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[0] == 0:
        raise PreconditionError("need a nonempty list of equal-length feature vectors")
    return phi.T @ phi / phi.shape[0]


def kl_block_metric(v_prev, group_sizes, ridge=0.0):
    """blockdiag of diag(p) - pp^T over consecutive groups, plus an optional ridge."""
    blocks, start = [], 0
    for n in group_sizes:
        blocks.append(kl_local_hessian(v_prev[start:start + n]))
        start += n
    m = sum(group_sizes)
    h = np.zeros((m, m))
    start = 0
    for b in blocks:
        n = b.shape[0]
        h[start:start + n, start:start + n] = b
        start += n
    return h + ridge * np.eye(m)


# ---------------------------------------------------------------- certificates

def _random_groups(rng, m):
    sizes = []
    left = m
    while left:
        n = int(min(left, rng.integers(2, 5)))
        if left - n == 1:
            n += 1
        sizes.append(n)
        left -= n
    return sizes


def _instance(rng, m):
    r = rng.normal(size=(m, m))
    return QuadraticRisk(r.T @ r, rng.normal(size=m)), rng.normal(size=m)


def certify_interpolation(n_instances=100, seed=0, solver=closed_form_min):
    rng = np.random.default_rng(seed)
    worst_interp = worst_rel = worst_stat = 0.0
    worst_rel_stat = 0.0
    for i in range(n_instances):
        m = (4, 8, 16)[i % 3]
        lam = (0.5, 2.0, 5.0)[(i // 3) % 3]
        risk, v_prev = _instance(rng, m)
        anchor = rng.normal(size=m)
        h = kl_block_metric(anchor, _random_groups(rng, m), ridge=CERT_RIDGE)
        v = solver(risk, (h, lam), v_prev)
        rep = verify_interpolation(risk, (h, lam), v_prev, v)
        worst_interp = max(worst_interp, rep.max_abs_err)
        worst_rel = max(worst_rel, rep.max_rel_err)
        res = stationarity_residual(risk, (h, lam), v_prev, v)
        worst_stat = max(worst_stat, res)
        scale = 1.0 + np.max(np.abs(risk.v_star)) + np.max(np.abs(v_prev))
        worst_rel_stat = max(worst_rel_stat, res / scale)
    ok = worst_interp <= 1e-8 and worst_stat <= 1e-9
    return {"name": "generalized_eigen_interpolation", "instances": n_instances,
            "max_interpolation_abs_err": worst_interp,
            "max_interpolation_rel_err": worst_rel,
            "max_stationarity_residual": worst_stat,
            "max_stationarity_residual_scaled": worst_rel_stat,
            "tolerances": {"interpolation": 1e-8, "stationarity": 1e-9},
            "passed": bool(ok)}


def certify_l2_interpolation(n_instances=100, seed=1, solver=closed_form_min):
    rng = np.random.default_rng(seed)
    worst_interp = worst_coeff = worst_vals = 0.0
    monotone = True
    for i in range(n_instances):
        m = (4, 8, 16)[i % 3]
        lam = (0.5, 2.0, 5.0)[(i // 3) % 3]
        risk, v_prev = _instance(rng, m)
        h = np.eye(m)
        v = solver(risk, (h, lam), v_prev)
        rep = verify_interpolation(risk, (h, lam), v_prev, v)
        worst_interp = max(worst_interp, rep.max_abs_err)
        ordinary = sym_eig(risk.Sigma)
        rhos = np.array([p.rho for p in rep.pairs])
        worst_vals = max(worst_vals, float(np.max(np.abs(rhos - ordinary.values))))
        expect = ordinary.values / (ordinary.values + lam)
        worst_coeff = max(worst_coeff, float(np.max(np.abs(
            np.array([p.coeff_new for p in rep.pairs]) - expect))))
        # coeff_new increases with rho at fixed lam
        cn = np.array([p.coeff_new for p in rep.pairs])
        order = np.argsort(rhos)
        distinct = np.diff(rhos[order]) > 1e-12
        if np.any(np.diff(cn[order])[distinct] <= 0):
            monotone = False
        # and decreases with lam at fixed rho > 0
        bigger = verify_interpolation(risk, (h, 2.0 * lam), v_prev,
                                      solver(risk, (h, 2.0 * lam), v_prev))
        for a, b in zip(rep.pairs, bigger.pairs):
            if a.rho > 0 and not b.coeff_new < a.coeff_new:
                monotone = False
    ok = worst_interp <= 1e-8 and worst_coeff <= 1e-10 and worst_vals <= 1e-9 and monotone
    return {"name": "l2_eigen_interpolation", "instances": n_instances,
            "max_interpolation_abs_err": worst_interp,
            "max_coefficient_err": worst_coeff,
            "max_eigenvalue_err": worst_vals,
            "monotone": monotone,
            "tolerances": {"interpolation": 1e-8, "coefficient": 1e-10, "eigenvalue": 1e-9},
            "passed": bool(ok)}


def _kl_shift(v_prev, delta):
    lq = log_softmax(v_prev + delta)
    lp = log_softmax(v_prev)
    return float(np.sum(np.exp(lq) * (lq - lp)))


def fd_hessian(f, dim, h=1e-4):
    """Second-order central-difference Hessian of ``f`` at the origin."""
    out = np.zeros((dim, dim))
    e = np.eye(dim) * h
    for a in range(dim):
        for b in range(a, dim):
            val = (f(e[a] + e[b]) - f(e[a] - e[b]) - f(-e[a] + e[b]) + f(-e[a] - e[b]))
            out[a, b] = out[b, a] = val / (4.0 * h * h)
    return out


def certify_kl_quadratic(n_seeds=50, seed=2, eps=1e-3):
    rng = np.random.default_rng(seed)
    worst_hess = worst_grad = worst_ratio = 0.0
    for _ in range(n_seeds):
        dim = int(rng.integers(2, 17))
        v_prev = rng.normal(size=dim)
        h_true = kl_local_hessian(v_prev)
        h_fd = fd_hessian(lambda d: _kl_shift(v_prev, d), dim)
        worst_hess = max(worst_hess, float(np.max(np.abs(h_fd - h_true))))
        pv = ParamVector([("g", v_prev)])
        worst_grad = max(worst_grad, float(np.max(np.abs(softmax_kl_grad(pv, pv).flat))))
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        quad = float(direction @ h_true @ direction)
        if quad > 1e-6:
            ratio = _kl_shift(v_prev, eps * direction) / (0.5 * eps * eps * quad)
            worst_ratio = max(worst_ratio, abs(ratio - 1.0))
    ok = worst_hess <= 1e-5 and worst_grad <= 1e-10 and worst_ratio <= 0.05
    return {"name": "softmax_kl_local_quadratic", "instances": n_seeds,
            "max_hessian_err": worst_hess, "max_grad_at_zero": worst_grad,
            "max_quadratic_ratio_dev": worst_ratio,
            "tolerances": {"hessian": 1e-5, "grad": 1e-10, "ratio": 0.05},
            "passed": bool(ok)}


def certify_kl_variance(n_cases=1000, seed=3):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        dim = int(rng.integers(1, 17))
        p = softmax(rng.normal(scale=2.0, size=dim))
        delta = rng.normal(size=dim)
        quad = float(delta @ (np.diag(p) - np.outer(p, p)) @ delta)
        mu = float(p @ delta)
        var = float(np.sum(p * (delta - mu) ** 2))
        worst = max(worst, abs(quad - var))
    return {"name": "kl_weighted_variance", "instances": n_cases, "max_abs_err": worst,
            "tolerances": {"abs": 1e-12}, "passed": bool(worst <= 1e-12)}


def certify_equivalence(n_instances=30, seed=4, solver=closed_form_min):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        m = (4, 8, 16)[i % 3]
        lam = (0.5, 2.0, 5.0)[(i // 3) % 3]
        risk, v_prev = _instance(rng, m)
        h = kl_block_metric(rng.normal(size=m), _random_groups(rng, m), ridge=CERT_RIDGE)
        dev, _ = descent_vs_closed_form(risk, (h, lam), v_prev)
        v_cf = solver(risk, (h, lam), v_prev)
        v_ref = closed_form_min(risk, (h, lam), v_prev)
        worst = max(worst, dev, float(np.max(np.abs(v_cf - v_ref))))
    return {"name": "descent_matches_closed_form", "instances": n_instances,
            "max_deviation": worst, "tolerances": {"abs": 1e-6},
            "passed": bool(worst <= 1e-6)}


def run_certificates(solver=closed_form_min) -> dict:
    """All certificate families; ``solver`` lets tests inject a broken minimizer."""
    checks = []
    for fn in (lambda: certify_interpolation(solver=solver), lambda: certify_l2_interpolation(solver=solver),
               certify_kl_quadratic, certify_kl_variance, lambda: certify_equivalence(solver=solver)):
        t0 = time.perf_counter()
        res = fn()
        res["seconds"] = time.perf_counter() - t0
        checks.append(res)
    return {"checks": checks, "passed": all(c["passed"] for c in checks)}
