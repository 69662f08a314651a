"""Malliavin covariance, Sobolev-Malliavin norms, and Monte Carlo checks of the
differentiability statements (Gateaux quotients, moment growth, densities)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import gaussian_kde

from .errors import DivergenceError, PreconditionError, StepError
from .integrate import StatePath, fit_loglog, scheme_tangent, solve_sde
from .model import SdeModel
from .paths import BrownianPath, CameronMartinDirection, TimeGrid, sample_ensemble, shift_path
from .variational import DerivativeGrid, FlowMatrices, SecondOrderGrid, flow_matrices, malliavin_directional

RANK_RTOL = 1e-8
PSD_RTOL = 1e-10


def rank_tol(max_eig: float) -> float:
    return RANK_RTOL * max(1.0, float(max_eig))


@dataclass(frozen=True)
class MalliavinMatrix:
    """``Q(t) = J C J^T``; arrays may carry a leading batch of paths."""

    t_index: int
    Q: np.ndarray
    C: np.ndarray
    eigenvalues: np.ndarray

    @property
    def min_eig(self) -> np.ndarray:
        return self.eigenvalues[..., 0]

    @property
    def max_eig(self) -> np.ndarray:
        return self.eigenvalues[..., -1]


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def malliavin_matrix(flow: FlowMatrices, state_path: StatePath, model: SdeModel, t_index: int) -> MalliavinMatrix:
    """Reduced covariance ``C = sum_{j<t} K_j sigma_j sigma_j^T K_j^T dt`` and ``Q = J(t) C J(t)^T``."""
    n = flow.grid.n_steps
    if not 0 <= t_index <= n:
        raise IndexError(f"t_index {t_index} outside [0, {n}]")
    if state_path.grid != flow.grid:
        raise ValueError("flow and state path live on different grids")
    sig = model.diffusion(state_path.states[..., :t_index, :])
    G = flow.K[..., :t_index, :, :] @ sig
    C = np.einsum("...jam,...jbm->...ab", G, G) * flow.grid.dt
    J = flow.J[..., t_index, :, :]
    Q = _symmetrize(J @ C @ np.swapaxes(J, -1, -2))
    if not np.all(np.isfinite(Q)):
        raise DivergenceError("non-finite Malliavin matrix")
    return MalliavinMatrix(t_index, Q, _symmetrize(C), np.linalg.eigvalsh(Q))


@dataclass(frozen=True)
class SpectrumReport:
    min_eig: np.ndarray
    max_eig: np.ndarray
    condition: np.ndarray
    rank: np.ndarray
    fraction_nondegenerate: float


def covariance_spectrum(Q) -> SpectrumReport:
    """Eigenvalue summary of one matrix or a batch; ``condition`` is ``inf`` when singular."""
    eig = Q.eigenvalues if isinstance(Q, MalliavinMatrix) else np.linalg.eigvalsh(_symmetrize(np.asarray(Q, float)))
    lo, hi = eig[..., 0], eig[..., -1]
    tol = RANK_RTOL * np.maximum(1.0, hi)
    rank = np.sum(eig > tol[..., None], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lo > tol, hi / np.where(lo > 0, lo, 1.0), np.inf)
    frac = float(np.mean(lo > tol))
    return SpectrumReport(lo, hi, cond, rank, frac)


def q_from_grid(grid: DerivativeGrid, t_index: int) -> np.ndarray:
    return grid.malliavin_matrix(t_index)


@dataclass
class GateauxReport:
    epsilons: np.ndarray
    mean_error: np.ndarray
    mean_quotient_norm: np.ndarray
    slope: float
    n_paths: int
    excluded: int
    errors: np.ndarray = field(repr=False)

    @property
    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.mean_error) < 0))

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.errors)) and np.all(np.isfinite(self.mean_quotient_norm)))


def _solve_or_none(model, x0, path, scheme):
    try:
        return solve_sde(model, x0, path, scheme).states
    except (DivergenceError, StepError):
        return None


def _solve_per_path(model, x0, paths: BrownianPath, scheme) -> tuple[np.ndarray, np.ndarray]:
    """Batched solve; on failure, retry path by path and mark the failures."""
    states = _solve_or_none(model, x0, paths, scheme)
    ok = np.ones(len(paths), dtype=bool)
    if states is not None:
        return states, ok
    states = np.full(paths.batch_shape + (paths.grid.n_steps + 1, model.d), np.nan)
    for i in range(len(paths)):
        s = _solve_or_none(model, x0, paths[i], scheme)
        if s is None:
            ok[i] = False
        else:
            states[i] = s
    return states, ok


def gateaux_quotient_test(
    model: SdeModel,
    x0,
    grid: TimeGrid,
    h: CameronMartinDirection,
    epsilons: Sequence[float],
    n_paths: int,
    seed: int,
    scheme: str = "implicit",
    linearization: str = "scheme",
) -> GateauxReport:
    """Difference quotients along ``eps h`` against the directional Malliavin derivative.

    Per path and ``eps``: ``sup_k |(X(w + eps h) - X(w)) / eps - M^h(t_k)|``.
    ``linearization="scheme"`` takes ``M^h`` as the exact tangent of the
    discrete scheme, so the error isolates the ``eps`` remainder;
    ``"euler"`` uses the Euler-Maruyama variational flow, whose own
    discretisation gap adds an ``eps``-independent floor.
    All ``eps`` reuse the same base paths.  Paths on which any solve fails are
    excluded and counted.
    """
    eps = np.asarray(epsilons, dtype=float)
    if eps.ndim != 1 or eps.size == 0 or np.any(eps <= 0) or np.any(eps > 1) or np.any(np.diff(eps) >= 0):
        raise PreconditionError("epsilons must be strictly decreasing values in (0, 1]")
    if h.grid != grid:
        raise ValueError("direction must live on the simulation grid")
    paths = sample_ensemble(grid, model.m, seed, n_paths)
    base, ok = _solve_per_path(model, x0, paths, scheme)
    shifted = []
    for e in eps:
        s, ok_e = _solve_per_path(model, x0, shift_path(paths, h, float(e)), scheme)
        shifted.append(s)
        ok &= ok_e
    keep = np.flatnonzero(ok)
    sp = StatePath(grid, base[keep], paths[keep], scheme)
    if linearization == "scheme":
        target = scheme_tangent(model, sp, h.hdot)
    elif linearization == "euler":
        target = malliavin_directional(model, flow_matrices(model, sp, paths[keep]), h.hdot)
    else:
        raise ValueError(f"linearization must be 'scheme' or 'euler', got {linearization!r}")
    errors = np.empty((eps.size, keep.size))
    qnorm = np.empty(eps.size)
    for i, e in enumerate(eps):
        quotient = (shifted[i][keep] - sp.states) / e
        errors[i] = np.max(np.linalg.norm(quotient - target, axis=-1), axis=-1)
        qnorm[i] = np.mean(np.max(np.linalg.norm(quotient, axis=-1), axis=-1))
    mean_err = errors.mean(axis=1)
    if eps.size >= 2 and np.all(mean_err > 0):
        slope = fit_loglog(eps, mean_err)[0]
    else:
        slope = float("nan")
    return GateauxReport(eps, mean_err, qnorm, slope, int(keep.size), int(n_paths - keep.size), errors)


@dataclass
class MomentRow:
    p: float
    sup_moment: float
    alpha_hat: float
    alpha_fit: float
    residual: float
    moments: np.ndarray = field(repr=False)


def moment_prefactor(x0, p: float) -> float:
    """``2^((p-2)/2) (1 + |x|^p)``."""
    r = float(np.linalg.norm(np.asarray(x0, float)))
    return 2.0 ** ((p - 2.0) / 2.0) * (1.0 + r**p)


def moment_bound_report(ensemble: StatePath, x0, p_list: Sequence[float]) -> list[MomentRow]:
    """Empirical moments against ``c0 exp(p alpha t)``.

    ``alpha_hat`` is the smallest non-negative ``alpha`` for which the
    envelope dominates the empirical ``E|X(t_k)|^p`` at every node;
    ``alpha_fit`` is the least-squares slope of ``log(m_k / c0)`` on ``p t_k``
    through the origin, with RMS residual.
    """
    X = ensemble.states
    if X.ndim != 3:
        raise ValueError("moment report needs a batched ensemble of shape (paths, n+1, d)")
    t = ensemble.grid.nodes
    norms = np.linalg.norm(X, axis=-1)
    rows = []
    for p in p_list:
        if p < 2:
            raise PreconditionError(f"moment order must be >= 2, got {p}")
        m = np.mean(norms**p, axis=0)
        c0 = moment_prefactor(x0, p)
        pos = t > 0
        with np.errstate(divide="ignore"):
            y = np.log(m[pos] / c0)
        ratio = y / (p * t[pos])
        alpha_hat = float(max(0.0, np.max(ratio))) if np.all(np.isfinite(ratio)) else 0.0
        finite = np.isfinite(y)
        pt = p * t[pos][finite]
        alpha_fit = float(np.dot(pt, y[finite]) / np.dot(pt, pt)) if pt.size else 0.0
        resid = float(np.sqrt(np.mean((y[finite] - alpha_fit * pt) ** 2))) if pt.size else 0.0
        sup_m = float(np.mean(np.max(norms, axis=-1) ** p))
        rows.append(MomentRow(float(p), sup_m, alpha_hat, alpha_fit, resid, m))
    return rows


@dataclass(frozen=True)
class NormEstimate:
    k: int
    p: float
    value: float
    n_paths: int
    stderr: float
    lp_value: float
    terms: tuple


def sobolev_norm_estimate(
    states: np.ndarray,
    first: Sequence[DerivativeGrid],
    k: int,
    p: float,
    t_index: int,
    second: Sequence[SecondOrderGrid] | None = None,
) -> NormEstimate:
    """``(E|X|^p + sum_{i<=k} E[(int |D^i X(t)|^2)^(p/2)])^(1/p)`` by Monte Carlo.

    ``states`` holds ``X(t)`` per path, ``(n_paths, d)``.  Integrals are left
    Riemann sums over the stored triangular grids.
    """
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    if k == 2 and second is None:
        raise PreconditionError("k = 2 needs second-order grids")
    states = np.asarray(states, dtype=float)
    n = states.shape[0]
    if len(first) != n or (second is not None and k == 2 and len(second) != n):
        raise ValueError("one derivative grid per path is required")
    a = np.linalg.norm(states, axis=-1) ** p
    parts = [a, np.array([g.energy(t_index) for g in first]) ** (p / 2)]
    if k == 2:
        parts.append(np.array([g.energy(t_index) for g in second]) ** (p / 2))
    total = np.sum(parts, axis=0)
    mean = float(np.mean(total))
    value = mean ** (1.0 / p)
    sd = float(np.std(total, ddof=1)) if n > 1 else 0.0
    stderr = value / (p * mean) * sd / np.sqrt(n) if mean > 0 else 0.0
    terms = tuple(float(np.mean(x)) for x in parts)
    return NormEstimate(k, float(p), value, n, float(stderr), float(np.mean(a)) ** (1.0 / p), terms)


@dataclass(frozen=True)
class KdeResult:
    x: np.ndarray
    density: np.ndarray
    bandwidth: float
    max_second_derivative: float

    @property
    def peak(self) -> float:
        return float(self.x[int(np.argmax(self.density))])


def silverman_bandwidth(samples: np.ndarray) -> float:
    sd = float(np.std(samples, ddof=1))
    q75, q25 = np.percentile(samples, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * samples.size ** (-0.2)


def kde_density(samples, bandwidth="silverman", n_grid: int = 512) -> KdeResult:
    """Gaussian KDE on ``n_grid`` points spanning the sample range padded by three bandwidths.

    The smoothness diagnostic is the largest absolute second difference
    quotient of the estimate on that grid.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 100:
        raise PreconditionError(f"need at least 100 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise PreconditionError("samples must be finite")
    sd = float(np.std(x, ddof=1))
    if sd == 0.0:
        raise PreconditionError("samples have zero variance")
    if bandwidth == "silverman":
        hbw = silverman_bandwidth(x)
    else:
        hbw = float(bandwidth)
        if not hbw > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth!r}")
    # gaussian_kde scales its factor by the sample standard deviation
    kde = gaussian_kde(x, bw_method=hbw / sd)
    grid = np.linspace(x.min() - 3 * hbw, x.max() + 3 * hbw, n_grid)
    dens = kde(grid)
    step = grid[1] - grid[0]
    d2 = np.diff(dens, 2) / step**2
    return KdeResult(grid, dens, hbw, float(np.max(np.abs(d2))))
