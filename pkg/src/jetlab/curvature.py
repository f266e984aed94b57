"""Hessian diagnostics: Lanczos top eigenpair, Hutchinson trace, loss slices, invariance ratios."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .diffengine import HvpOperator, ParamVector
from .kinematics import BoostVector
from .model import Batch, ModelConfig, predict
from .objectives import boosted_view


class LanczosBreakdown(RuntimeError):
    pass


@dataclass
class EigenResult:
    lambda_1: float
    nu_1: np.ndarray = field(repr=False)
    residual: float
    iterations: int
    converged: bool
    tol: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("nu_1")
        return d


@dataclass
class TraceResult:
    estimate: float
    n_probes: int
    stderr: float | None
    samples: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "n_probes": self.n_probes, "stderr": self.stderr}


def top_eigenpair(op: HvpOperator, max_iter: int = 100, tol: float = 1e-6, seed: int = 0, max_restarts: int = 3) -> EigenResult:
    """Largest-magnitude eigenpair by Lanczos with full reorthogonalisation.

    Convergence is declared on the true residual ``|H nu - lambda nu|``
    against ``tol * max(1, |lambda|)``; hitting ``max_iter`` first returns the
    current Ritz pair with ``converged=False``.
    """
    dim = op.dim
    rng = np.random.default_rng(seed)
    m = min(max_iter, dim)
    Q = np.zeros((m, dim))
    alphas: list[float] = []
    betas: list[float] = []
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    restarts = 0
    scale = 0.0
    for k in range(m):
        Q[k] = q
        w = op.apply(q)
        alpha = float(q @ w)
        alphas.append(alpha)
        w = w - alpha * q
        if k > 0 and betas[-1] != 0.0:
            w -= betas[-1] * Q[k - 1]
        basis = Q[: k + 1]
        for _ in range(2):
            w -= basis.T @ (basis @ w)
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta)

        evals, evecs = eigh_tridiagonal(np.array(alphas), np.array(betas)) if k else (np.array(alphas), np.ones((1, 1)))
        j = int(np.argmax(np.abs(evals)))
        lam = float(evals[j])
        est = beta * abs(evecs[-1, j])
        threshold = tol * max(1.0, abs(lam))
        last = k + 1 == m
        if est < threshold or last or beta <= 1e-12 * max(scale, 1.0):
            nu = basis.T @ evecs[:, j]
            nu /= np.linalg.norm(nu)
            residual = float(np.linalg.norm(op.apply(nu) - lam * nu))
            if residual < threshold:
                return EigenResult(lam, nu, residual, k + 1, True, tol)
            if last:
                return EigenResult(lam, nu, residual, k + 1, False, tol)
        if beta <= 1e-12 * max(scale, 1.0):
            # invariant subspace without a converged pair: continue from a fresh direction
            restarts += 1
            if restarts > max_restarts:
                raise LanczosBreakdown(f"Lanczos broke down {restarts} times")
            q = rng.standard_normal(dim)
            for _ in range(2):
                q -= basis.T @ (basis @ q)
            q /= np.linalg.norm(q)
            betas.append(0.0)
        else:
            q = w / beta
            betas.append(beta)
    raise AssertionError("unreachable")


def hutchinson_trace(op: HvpOperator, n_probes: int = 100, seed: int = 0) -> TraceResult:
    """Mean of z^T H z over Rademacher probes."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_probes):
        z = rng.integers(0, 2, op.dim) * 2.0 - 1.0
        samples.append(float(z @ op.apply(z)))
    arr = np.array(samples)
    stderr = float(arr.std(ddof=1) / math.sqrt(n_probes)) if n_probes >= 2 else None
    return TraceResult(float(arr.mean()), n_probes, stderr, samples)


def curvature_ratios(constrained: tuple[EigenResult, TraceResult], unconstrained: tuple[EigenResult, TraceResult], provenance: dict | None = None) -> dict:
    (e_con, t_con), (e_unc, t_unc) = constrained, unconstrained
    return {
        "lambda1_ratio": e_con.lambda_1 / e_unc.lambda_1,
        "trace_ratio": t_con.estimate / t_unc.estimate,
        "lambda1": {"constrained": e_con.lambda_1, "unconstrained": e_unc.lambda_1},
        "trace": {"constrained": t_con.estimate, "unconstrained": t_unc.estimate},
        "degraded": not (e_con.converged and e_unc.converged),
        "provenance": dict(provenance or {}),
    }


# ----------------------------------------------------------- parameter slices


@dataclass
class SliceResult:
    epsilons: list[float]
    losses: list[float | None]
    missing: int = 0

    def max_increase(self) -> float:
        base = self.losses[self.epsilons.index(0.0)]
        return max(l - base for l in self.losses if l is not None)


def slice_scale(loss0: float, lambda_1: float, fraction: float = 0.1) -> float:
    """Step s where the quadratic model lambda_1 s^2 / 2 equals ``fraction * loss0``."""
    return math.sqrt(2.0 * fraction * abs(loss0) / abs(lambda_1))


def slice_grid(scale: float, n: int = 11) -> list[float]:
    grid = [float(x) for x in np.linspace(-scale, scale, n)]
    grid[n // 2] = 0.0
    return grid


def loss_slice(params: ParamVector, nu_1, grid, loss: Callable[[ParamVector], float]) -> SliceResult:
    """``loss(params + eps * nu_1)`` on each grid point; non-finite points count as missing."""
    nu = np.asarray(nu_1, dtype=np.float64)
    if abs(np.linalg.norm(nu) - 1.0) > 1e-8:
        raise ValueError("nu_1 must be a unit vector")
    grid = [float(e) for e in grid]
    if 0.0 not in grid:
        raise ValueError("grid must contain 0")
    losses: list[float | None] = []
    missing = 0
    for eps in grid:
        theta = params if eps == 0 else params.replace(params.values + eps * nu)
        try:
            value = float(loss(theta))
        except FloatingPointError:
            value = float("nan")
        if not math.isfinite(value):
            losses.append(None)
            missing += 1
        else:
            losses.append(value)
    return SliceResult(grid, losses, missing)


@dataclass
class GoldstoneResult:
    epsilons: list[float]
    ratios: list[float | None]
    dispersion: list[float | None]
    median_abs_deviation: list[float | None]
    excluded: list[int]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def goldstone_ratio(
    params: ParamVector,
    nu_1,
    grid,
    config: ModelConfig,
    probe: Batch,
    boost: BoostVector,
    min_denominator: float = 1e-12,
) -> GoldstoneResult:
    """Ratio of sigmoid outputs on a jet and its boosted copy along ``params + eps nu_1``.

    One boost ``g`` is applied to every probe jet.  Per grid point the median
    ratio, its inter-quartile range, and the median of ``|R - 1|`` are kept;
    a point where every jet was excluded is reported as ``None``.
    """
    if len(probe) == 0:
        raise ValueError("probe batch is empty")
    B = len(probe)
    view = boosted_view(probe, np.tile(np.asarray(boost.n, dtype=np.float64), (B, 1)), np.full(B, boost.y)).batch
    nu = np.asarray(nu_1, dtype=np.float64)
    med, iqr, mad, excluded = [], [], [], []
    for eps in grid:
        theta = params if eps == 0 else params.replace(params.values + eps * nu)
        num = _sigmoid(predict(theta, config, probe))
        den = _sigmoid(predict(theta, config, view))
        ok = den >= min_denominator
        r = num[ok] / den[ok]
        excluded.append(int((~ok).sum()))
        if r.size == 0:
            # nothing left to summarise at this point; recorded as missing
            med.append(None)
            iqr.append(None)
            mad.append(None)
            continue
        q1, q2, q3 = np.percentile(r, [25, 50, 75])
        med.append(float(q2))
        iqr.append(float(q3 - q1))
        mad.append(float(np.median(np.abs(r - 1.0))))
    return GoldstoneResult([float(e) for e in grid], med, iqr, mad, excluded)
