"""Time stepping for the nonlinear SDE and for the linear variational SDEs.

All solvers are vectorised over an optional leading batch of paths.  The
implicit step freezes each path once its own Newton residual converges, so a
path's result never depends on which other paths share its batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, PreconditionError, StepError
from .model import SdeModel
from .paths import BrownianPath, TimeGrid, sample_ensemble

SCHEMES = ("implicit", "tamed", "explicit")
NEWTON_RTOL = 1e-12
NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class StatePath:
    """Solution on a grid: ``states`` has shape ``(..., n_steps + 1, d)``."""

    grid: TimeGrid
    states: np.ndarray
    path: BrownianPath | None = None
    scheme: str = ""

    @property
    def d(self) -> int:
        return self.states.shape[-1]

    def __getitem__(self, idx) -> "StatePath":
        sub = None if self.path is None else self.path[idx]
        return StatePath(self.grid, self.states[idx], sub, self.scheme)


@dataclass(frozen=True)
class LinearSdeCoefficients:
    """Coefficients of ``dY = (U + B Y) dt + sum_i (V^i + S^i Y) dW^i`` started at node ``start``.

    Shapes (leading batch axes allowed, ``Y`` is ``(d,)`` or ``(d, q)``):
    ``drift_matrix`` ``(n+1, d, d)``; ``diffusion_matrices`` ``(n+1, m, d, d)``
    with ``[k, i]`` the Jacobian of diffusion column ``i``; ``drift_forcing``
    ``(n+1,) + Y.shape``; ``diffusion_forcing`` ``(n+1,) + Y.shape + (m,)``.
    ``matrix_valued`` marks ``alpha`` as ``(d, q)``, solved column by column.
    """

    start: int
    alpha: np.ndarray
    drift_matrix: np.ndarray
    diffusion_matrices: np.ndarray
    drift_forcing: np.ndarray | None = None
    diffusion_forcing: np.ndarray | None = None
    matrix_valued: bool = False


def check_implicit_dt(model: SdeModel, dt: float) -> None:
    L = model.monotone_constant
    if L is not None and dt * L >= 1.0:
        raise PreconditionError(f"implicit step needs dt * L < 1, got dt={dt:g}, L={L:g}")


def vnorm(v: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Euclidean norm that stays finite for entries beyond ``sqrt(max float)``."""
    v = np.asarray(v, dtype=float)
    scale = np.max(np.abs(v), axis=axis, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = scale * np.sqrt(np.sum((v / np.where(scale > 0, scale, 1.0)) ** 2, axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def _matvec(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", a, v)


def _newton_solve(model: SdeModel, c: np.ndarray, dt: float, tol: np.ndarray, max_iter: int) -> np.ndarray:
    """Root of ``G(z) = z - c - dt b(z)`` per batch row, Newton with backtracking."""
    d = c.shape[-1]
    flat_c = c.reshape(-1, d)
    tol = np.broadcast_to(tol, c.shape[:-1]).reshape(-1)
    z = flat_c.copy()
    res = z - flat_c - dt * model.drift(z)
    rnorm = vnorm(res)
    active = np.flatnonzero(~(rnorm <= tol))
    eye = np.eye(d)
    for _ in range(max_iter):
        if active.size == 0:
            break
        za, ra = z[active], res[active]
        jac = eye - dt * model.drift_jacobian(za)
        step = _linear_solve(jac, ra)
        lam = np.ones(active.size)
        cand = za - step
        cres = cand - flat_c[active] - dt * model.drift(cand)
        cnorm = vnorm(cres)
        worse = ~(cnorm < rnorm[active])
        for _ in range(30):
            if not np.any(worse):
                break
            lam[worse] *= 0.5
            w = np.flatnonzero(worse)
            cand[w] = za[w] - lam[w, None] * step[w]
            cres[w] = cand[w] - flat_c[active[w]] - dt * model.drift(cand[w])
            cnorm[w] = vnorm(cres[w])
            worse[w] = ~(cnorm[w] < rnorm[active[w]])
        # rows that cannot decrease the residual keep their iterate and fail below
        ok = ~worse
        upd = active[ok]
        z[upd], res[upd], rnorm[upd] = cand[ok], cres[ok], cnorm[ok]
        done = rnorm[active] <= tol[active]
        active = active[~done & ok]
    if not np.all(rnorm <= tol):
        bad = int(np.flatnonzero(~(rnorm <= tol))[0])
        raise StepError(f"Newton iteration did not converge (residual {rnorm[bad]:.3e}, tol {tol[bad]:.3e})")
    return z.reshape(c.shape)


def _linear_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] == 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = b / a[..., 0]
        bad = ~np.all(np.isfinite(out), axis=-1)
    else:
        out = np.empty_like(b)
        bad = np.zeros(b.shape[0], dtype=bool)
        try:
            out = np.linalg.solve(a, b[..., None])[..., 0]
        except np.linalg.LinAlgError:
            for i in range(b.shape[0]):
                try:
                    out[i] = np.linalg.solve(a[i], b[i])
                except np.linalg.LinAlgError:
                    bad[i] = True
    # singular Jacobian: damped fixed-point step z <- z - G/2
    out[bad] = 0.5 * b[bad]
    return out


def implicit_step(model: SdeModel, x, dt: float, dW, max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
    """Drift-implicit Euler step ``x' = x + b(x') dt + sigma(x) dW``.

    Solved by Newton's method on ``z - x - b(z) dt - sigma(x) dW`` with
    Jacobian ``I - dt grad b(z)``, to a residual of ``1e-12 (1 + |x|)``.
    """
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    check_implicit_dt(model, dt)
    return _implicit(model, x, dt, dW, max_iter)


def _implicit(model, x, dt, dW, max_iter=NEWTON_MAX_ITER):
    c = x + _matvec(model.diffusion(x), dW)
    tol = NEWTON_RTOL * (1.0 + vnorm(x))
    return _newton_solve(model, c, dt, tol, max_iter)


def _tamed(model, x, dt, dW):
    b = model.drift(x)
    bn = vnorm(b, keepdims=True)
    return x + b * dt / (1.0 + dt * bn) + _matvec(model.diffusion(x), dW)


def _explicit(model, x, dt, dW):
    return x + model.drift(x) * dt + _matvec(model.diffusion(x), dW)


def _step(scheme, model, x, dt, dW):
    if scheme == "implicit":
        return _implicit(model, x, dt, dW)
    if scheme == "tamed":
        return _tamed(model, x, dt, dW)
    return _explicit(model, x, dt, dW)


def solve_sde(model: SdeModel, x0, path: BrownianPath, scheme: str = "implicit") -> StatePath:
    """Integrate the SDE along ``path`` (single or batched) with the given scheme."""
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if path.m != model.m:
        raise ValueError(f"path has m={path.m}, model expects m={model.m}")
    dt = path.grid.dt
    if scheme == "explicit" and not model.globally_lipschitz:
        raise PreconditionError(f"explicit scheme is only allowed for globally Lipschitz models, not {model.name!r}")
    if scheme == "implicit":
        check_implicit_dt(model, dt)
    x0 = np.asarray(x0, dtype=float).reshape(-1) if np.ndim(x0) <= 1 else np.asarray(x0, dtype=float)
    if x0.shape[-1] != model.d:
        raise ValueError(f"x0 has dimension {x0.shape[-1]}, model expects {model.d}")
    batch = path.batch_shape
    n = path.grid.n_steps
    states = np.empty(batch + (n + 1, model.d))
    states[..., 0, :] = np.broadcast_to(x0, batch + (model.d,))
    inc = path.increments
    for k in range(n):
        x, dW = states[..., k, :], inc[..., k, :]
        try:
            # overflow shows up as a non-finite state or a failed Newton solve, both reported below
            with np.errstate(over="ignore", invalid="ignore"):
                nxt = _step(scheme, model, x, dt, dW)
        except StepError as exc:
            raise StepError(f"step {k}: {exc}", step_index=k) from exc
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"non-finite state at step {k + 1}", step_index=k + 1)
        states[..., k + 1, :] = nxt
    return StatePath(path.grid, states, path, scheme)


def solve_linear_sde(coeffs: LinearSdeCoefficients, path: BrownianPath) -> StatePath:
    """Euler-Maruyama for the linear SDE, ``Y = 0`` before ``start`` and ``Y = alpha`` at it."""
    n = path.grid.n_steps
    dt = path.grid.dt
    r = int(coeffs.start)
    if not 0 <= r <= n:
        raise ValueError(f"start index {r} outside [0, {n}]")
    B = np.asarray(coeffs.drift_matrix, dtype=float)
    S = np.asarray(coeffs.diffusion_matrices, dtype=float)
    alpha = np.asarray(coeffs.alpha, dtype=float)
    if B.shape[-3] != n + 1 or S.shape[-4] != n + 1:
        raise ValueError("coefficient grids must have one entry per node")
    vector = not coeffs.matrix_valued
    Y = alpha[..., None] if vector else alpha
    U = coeffs.drift_forcing
    V = coeffs.diffusion_forcing
    if U is not None:
        U = np.asarray(U, dtype=float)
        U = U[..., None] if vector else U
    if V is not None:
        V = np.asarray(V, dtype=float)
        V = V[..., None, :] if vector else V
    inc = path.increments
    batch = np.broadcast_shapes(B.shape[:-3], inc.shape[:-2], Y.shape[:-2])
    out = np.zeros(batch + (n + 1,) + Y.shape[-2:])
    Y = np.broadcast_to(Y, batch + Y.shape[-2:]).copy()
    out[..., r, :, :] = Y
    for k in range(r, n):
        dW = inc[..., k, :]
        drift = B[..., k, :, :] @ Y
        if U is not None:
            drift = drift + U[..., k, :, :]
        noise = np.einsum("...ijl,...lq,...i->...jq", S[..., k, :, :, :], Y, dW)
        if V is not None:
            noise = noise + np.einsum("...jqi,...i->...jq", V[..., k, :, :, :], dW)
        Y = Y + drift * dt + noise
        if not np.all(np.isfinite(Y)):
            raise DivergenceError(f"non-finite linear-SDE state at step {k + 1}", step_index=k + 1)
        out[..., k + 1, :, :] = Y
    states = out[..., 0] if vector else out
    return StatePath(path.grid, states, path, "linear-euler")


@dataclass
class StrongErrorTable:
    dts: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    r2: float
    oracle_steps: int
    n_paths: int


def fit_loglog(x, y) -> tuple[float, float, float]:
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if lx.size < 2:
        return float("nan"), float("nan"), float("nan")
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def strong_error_table(
    model: SdeModel,
    x0,
    T: float,
    resolutions,
    n_paths: int,
    seed: int,
    scheme: str = "implicit",
    oracle_steps: int | None = None,
) -> StrongErrorTable:
    """RMS error at ``T`` against a fine-grid solution driven by the same Brownian paths.

    Coarse grids see the fine increments summed in blocks.  ``oracle_steps``
    defaults to eight times the finest resolution.
    """
    resolutions = sorted(int(r) for r in resolutions)
    fine = int(oracle_steps or 8 * resolutions[-1])
    if any(fine % r for r in resolutions):
        raise ValueError(f"every resolution must divide the oracle resolution {fine}")
    if fine in resolutions:
        raise ValueError("the oracle resolution must be finer than every tested resolution")
    paths = sample_ensemble(TimeGrid(T, fine), model.m, seed, n_paths)
    oracle = solve_sde(model, x0, paths, scheme).states[..., -1, :]
    errors = []
    for r in resolutions:
        coarse = solve_sde(model, x0, paths.coarsen(fine // r), scheme).states[..., -1, :]
        errors.append(np.sqrt(np.mean(np.sum((coarse - oracle) ** 2, axis=-1))))
    dts = T / np.array(resolutions, dtype=float)
    errors = np.array(errors)
    slope, intercept, r2 = fit_loglog(dts, errors)
    return StrongErrorTable(dts, errors, slope, intercept, r2, fine, n_paths)


def scheme_tangent(model: SdeModel, state_path: StatePath, hdot: np.ndarray) -> np.ndarray:
    """Exact derivative of the discrete solution map along the increment shift ``hdot dt``.

    For the implicit scheme ``M_{k+1} = (I - dt grad b(X_{k+1}))^{-1} [(I + sum_i
    grad sigma^i(X_k) dW^i) M_k + sigma(X_k) hdot_k dt]``; the tamed and explicit
    schemes use the Jacobian of their explicit drift map instead.  Returns
    ``(..., n+1, d)`` with ``M_0 = 0``.
    """
    path = state_path.path
    if path is None:
        raise ValueError("state path carries no Brownian path")
    scheme = state_path.scheme
    X = state_path.states
    n, dt, d = path.grid.n_steps, path.grid.dt, model.d
    hdot = np.asarray(hdot, dtype=float)
    inc = path.increments
    eye = np.eye(d)
    sig = model.diffusion(X)
    DJ = model.diffusion_jacobian(X)  # (..., n+1, d, m, d)
    out = np.zeros(X.shape)
    M = out[..., 0, :].copy()
    for k in range(n):
        noise = np.einsum("...aib,...b,...i->...a", DJ[..., k, :, :, :], M, inc[..., k, :])
        rhs = M + noise + _matvec(sig[..., k, :, :], hdot[k]) * dt
        if scheme == "implicit":
            A = eye - dt * model.drift_jacobian(X[..., k + 1, :])
            M = np.linalg.solve(A, rhs[..., None])[..., 0]
        else:
            Bk = model.drift_jacobian(X[..., k, :])
            if scheme == "tamed":
                b = model.drift(X[..., k, :])
                bn = vnorm(b)[..., None, None]
                grad_norm = np.einsum("...a,...ab->...b", b, Bk) / np.where(bn[..., 0] > 0, bn[..., 0], 1.0)
                Bk = Bk / (1 + dt * bn) - dt * b[..., :, None] * grad_norm[..., None, :] / (1 + dt * bn) ** 2
            M = rhs + dt * _matvec(Bk, M)
        out[..., k + 1, :] = M
    return out
