"""Closed-form recovery-risk metrics built on the mixed Jacobian.

The central quantity is b = (J J^T + eps I)^{-1} J delta for a gradient
perturbation delta; ||b|| approximates how far the reconstructed sample
moves.  Four interchangeable solvers are provided (dense, least-squares
gradient descent, conjugate gradient, Neumann recursion), all matrix-free
except the dense one, plus spectral utilities and the certified bound
from the Lipschitz constants of the gradient and the Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import BudgetError, MixedJacobianOperator

SOLVER_MODES = ("gradient_descent", "conjugate_gradient", "neumann", "dense")


@dataclass(frozen=True)
class SolverConfig:
    mode: str = "conjugate_gradient"
    epsilon: float = 1.0
    max_iters: int = 500
    tolerance: float = 1e-10
    step_size: float | None = None  # gradient_descent; default 1/(lambda_max+eps)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SOLVER_MODES:
            raise ValueError(f"unknown solver mode {self.mode!r}")
        if self.epsilon < 0 or self.tolerance <= 0 or self.max_iters < 1:
            raise ValueError("need epsilon >= 0, tolerance > 0, max_iters >= 1")


@dataclass
class I2FReport:
    exact_value: float = float("nan")
    lower_bound: float = float("nan")
    solution: np.ndarray | None = None
    iterations: int = 0
    residual: float = float("nan")
    lambda_max: float = float("nan")
    converged: bool = True


@dataclass(frozen=True)
class SpectrumReport:
    eigenvalues: np.ndarray      # of J J^T, descending
    singular_values: np.ndarray  # sqrt of the above
    rank: int
    rank_threshold: float

RANK_THRESHOLD_REL = 1e-10  # eigenvalue below this fraction of the max counts as zero


def lambda_max_power_iteration(operator: MixedJacobianOperator, iters=200, tol=1e-9, seed=0):
    """Largest eigenvalue of J J^T via v <- J (J^T v), Rayleigh quotient."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.normal(size=operator.d_x)
    v /= np.linalg.norm(v)
    lam = 0.0
    converged = False
    trace = []
    for it in range(1, iters + 1):
        av = operator.jvp(operator.vjp(v))
        lam_new = float(v @ av)
        nrm = np.linalg.norm(av)
        if nrm == 0.0:
            return 0.0, it, True, [0.0]
        v = av / nrm
        trace.append(lam_new)
        if it > 1 and abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            lam = lam_new
            converged = True
            break
        lam = lam_new
    return lam, len(trace), converged, trace


def _normal_matvec(operator, eps):
    return lambda s: operator.jvp(operator.vjp(s)) + eps * s


def i2f_exact(operator: MixedJacobianOperator, delta, cfg: SolverConfig,
              budget=10_000_000) -> I2FReport:
    """||(J J^T + eps I)^{-1} J delta|| with the configured solver."""
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if delta.size != operator.d_theta:
        raise ValueError(f"delta length {delta.size} != d_theta {operator.d_theta}")
    eps = cfg.epsilon
    rep = I2FReport()
    c = operator.jvp(delta)  # J delta
    matvec = _normal_matvec(operator, eps)

    if cfg.mode == "dense":
        J = _dense_from_operator(operator, budget)
        A = J @ J.T + eps * np.eye(operator.d_x)
        b = np.linalg.solve(A, J @ delta)
        rep.iterations = 1
    elif cfg.mode == "conjugate_gradient":
        b, rep.iterations, rep.converged = _conjugate_gradient(matvec, c, cfg.max_iters, cfg.tolerance)
    elif cfg.mode == "gradient_descent":
        lam, _, _, _ = lambda_max_power_iteration(operator, seed=cfg.seed)
        step = cfg.step_size if cfg.step_size is not None else 1.0 / (lam + eps)
        b = np.zeros_like(c)
        rep.converged = False
        for it in range(1, cfg.max_iters + 1):
            r = matvec(b) - c
            b = b - step * r
            if np.linalg.norm(r) <= cfg.tolerance * max(1.0, np.linalg.norm(c)):
                rep.converged = True
                break
        rep.iterations = it
    else:  # neumann, pre-scaled so the recursion contracts
        lam, _, _, _ = lambda_max_power_iteration(operator, seed=cfg.seed)
        alpha = 1.0 / (lam + eps)
        s = alpha * c
        rep.converged = False
        for it in range(1, cfg.max_iters + 1):
            s = s - alpha * matvec(s) + alpha * c
            r = matvec(s) - c
            if np.linalg.norm(r) <= cfg.tolerance * max(1.0, np.linalg.norm(c)):
                rep.converged = True
                break
        b = s
        rep.iterations = it

    rep.solution = b
    rep.residual = float(np.linalg.norm(matvec(b) - c))
    rep.exact_value = float(np.linalg.norm(b))
    return rep


def _dense_from_operator(operator, budget):
    entries = operator.d_x * operator.d_theta
    if entries > budget:
        raise BudgetError(f"dense solve needs {entries} Jacobian entries, budget is {budget}")
    rows = [operator.vjp(_basis(operator.d_x, i)) for i in range(operator.d_x)]
    return np.stack(rows, axis=0)


def _basis(n, i):
    e = np.zeros(n)
    e[i] = 1.0
    return e


def _conjugate_gradient(matvec, c, max_iters, tol):
    b = np.zeros_like(c)
    r = c - matvec(b)
    p = r.copy()
    rs = float(r @ r)
    target = tol * max(1.0, np.linalg.norm(c))
    for it in range(1, max_iters + 1):
        if np.sqrt(rs) <= target:
            return b, it - 1, True
        ap = matvec(p)
        alpha = rs / float(p @ ap)
        b = b + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return b, max_iters, np.sqrt(rs) <= target


def i2f_lower_bound(operator: MixedJacobianOperator, delta, iters=200, tol=1e-9, seed=0) -> I2FReport:
    """||J delta|| / lambda_max(J J^T), the cheap certified floor."""
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    lam, n_it, converged, _ = lambda_max_power_iteration(operator, iters=iters, tol=tol, seed=seed)
    rep = I2FReport()
    rep.lambda_max = lam
    rep.iterations = n_it
    rep.converged = converged
    rep.lower_bound = float(np.linalg.norm(operator.jvp(delta)) / lam)
    return rep


def dense_spectrum(operator: MixedJacobianOperator, budget=10_000_000) -> SpectrumReport:
    J = _dense_from_operator(operator, budget)
    eig = np.linalg.eigvalsh(J @ J.T)[::-1]
    eig = np.clip(eig, 0.0, None)
    thresh = RANK_THRESHOLD_REL * (eig[0] if eig.size else 0.0)
    rank = int(np.sum(eig > thresh))
    return SpectrumReport(eigenvalues=eig, singular_values=np.sqrt(eig), rank=rank, rank_threshold=thresh)


class SingularSpectrumError(ValueError):
    pass


def expected_gaussian_risk(spectrum: SpectrumReport, variance=1.0, epsilon=0.0) -> float:
    """E ||(J J^T + eps I)^{-1} J delta||^2 for delta ~ N(0, variance I).

    With eps = 0 this is variance * sum(1/lambda_i) over the nonzero
    eigenvalues of J J^T and requires a full-rank spectrum.
    """
    if variance < 0:
        raise ValueError("variance must be >= 0")
    eig = spectrum.eigenvalues
    if epsilon == 0.0:
        if np.any(eig <= spectrum.rank_threshold):
            raise SingularSpectrumError(
                "spectrum has eigenvalues at the rank threshold; "
                "pass epsilon > 0 to use the damped expectation")
        return float(variance * np.sum(1.0 / eig))
    return float(variance * np.sum(eig / (eig + epsilon) ** 2))


def theorem_bound(j_norm, mu_l, mu_j, g0, delta, jdelta_norm) -> float:
    """Certified recovery-error floor ||J d|| / (mu_L ||J|| + 2 mu_J ||g0 + d||)."""
    if mu_l < 0 or mu_j < 0 or (mu_l == 0 and mu_j == 0):
        raise ValueError("need mu_l > 0 or mu_j > 0, both non-negative")
    g0 = np.asarray(g0, dtype=np.float64).reshape(-1)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    denom = mu_l * j_norm + 2.0 * mu_j * np.linalg.norm(g0 + delta)
    if denom == 0.0:
        raise ValueError("zero denominator in certified bound")
    return float(jdelta_norm / denom)


@dataclass(frozen=True)
class LipschitzEstimate:
    mu_l: float
    mu_j: float
    n_pairs: int
    radius: float


def estimate_lipschitz(spec, params, samples, n_pairs=10, radius=1e-2, seed=0,
                       power_iters=50) -> LipschitzEstimate:
    """Empirical max-over-pairs estimates of the gradient/Jacobian Lipschitz
    constants w.r.t. the input.  Pairs are (x, x + radius * unit direction)."""
    if n_pairs < 1 or radius <= 0:
        raise ValueError("need n_pairs >= 1 and radius > 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    mu_l = 0.0
    mu_j = 0.0
    for k in range(n_pairs):
        sample = samples[k % len(samples)]
        x = np.asarray(sample.image, dtype=np.float64)
        y = sample.label
        direction = rng.normal(size=x.shape)
        direction /= np.linalg.norm(direction)
        x2 = x + radius * direction
        dist = radius
        op1 = MixedJacobianOperator(spec, params, x, y)
        op2 = MixedJacobianOperator(spec, params, x2, y)
        mu_l = max(mu_l, float(np.linalg.norm(op1.g_theta - op2.g_theta) / dist))
        # operator norm of (J - J') by power iteration on the difference
        v = rng.normal(size=spec.d_x)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(power_iters):
            w = op1.vjp(v) - op2.vjp(v)
            av = op1.jvp(w) - op2.jvp(w)
            lam = float(v @ av)
            nrm = np.linalg.norm(av)
            if nrm == 0.0:
                lam = 0.0
                break
            v = av / nrm
        mu_j = max(mu_j, float(np.sqrt(max(lam, 0.0)) / dist))
    return LipschitzEstimate(mu_l=mu_l, mu_j=mu_j, n_pairs=n_pairs, radius=radius)
