"""Jacobian flow, its inverse, and first/second-order Malliavin derivative grids.

The variational equations are linear with path-wise bounded coefficients,
so they are stepped with explicit Euler-Maruyama on the grid of the state
path.  Grids index noise times ``s`` by grid node: ``D_{t_j} X(t_k)`` is the
response of ``X(t_k)`` to the increment ``dW`` on the cell ``[t_j, t_{j+1})``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, MemoryBudgetError
from .integrate import LinearSdeCoefficients, StatePath, fit_loglog, solve_linear_sde, solve_sde
from .model import SdeModel
from .paths import BrownianPath, TimeGrid, sample_ensemble

DEFAULT_MEMORY_BUDGET = 50_000_000  # float64 entries
DEFAULT_COARSENING = 4


def flow_tol(dt: float, constant: float = 1.0) -> float:
    """``C dt^(1/2) (1 + log(1/dt))``: the scale of the discrete flow-identity defect."""
    return constant * np.sqrt(dt) * (1.0 + np.log(1.0 / dt))


def linear_coefficients(model: SdeModel, state_path: StatePath) -> tuple[np.ndarray, np.ndarray]:
    """``grad b(X_k)`` as ``(..., n+1, d, d)`` and ``grad sigma^i(X_k)`` as ``(..., n+1, m, d, d)``."""
    X = state_path.states
    B = model.drift_jacobian(X)
    S = np.moveaxis(model.diffusion_jacobian(X), -2, -3)
    if not (np.all(np.isfinite(B)) and np.all(np.isfinite(S))):
        raise DivergenceError("non-finite drift or diffusion Jacobian along the path")
    return B, S


def _check_path(state_path: StatePath, path: BrownianPath) -> None:
    if state_path.grid != path.grid:
        raise ValueError("state path and Brownian path live on different grids")
    if state_path.states.shape[:-2] != path.batch_shape:
        raise ValueError("state path and Brownian path have different batch shapes")


@dataclass(frozen=True)
class FlowMatrices:
    """``J(t_k)`` and ``K(t_k)`` with shape ``(..., n+1, d, d)``."""

    grid: TimeGrid
    J: np.ndarray
    K: np.ndarray
    state_path: StatePath

    def identity_defect(self) -> np.ndarray:
        """``||K(t_k) J(t_k) - I||_F`` at every node."""
        d = self.J.shape[-1]
        return np.linalg.norm(self.K @ self.J - np.eye(d), axis=(-2, -1))

    def max_identity_defect(self) -> np.ndarray:
        return np.max(self.identity_defect(), axis=-1)


def jacobian_flow(model: SdeModel, state_path: StatePath, path: BrownianPath) -> np.ndarray:
    """``J`` solving ``dJ = grad b(X) J dt + sum_i grad sigma^i(X) J dW^i``, ``J(0) = I``."""
    _check_path(state_path, path)
    B, S = linear_coefficients(model, state_path)
    coeffs = LinearSdeCoefficients(start=0, alpha=np.eye(model.d), drift_matrix=B, diffusion_matrices=S, matrix_valued=True)
    return solve_linear_sde(coeffs, path).states


def inverse_flow(model: SdeModel, state_path: StatePath, path: BrownianPath) -> np.ndarray:
    """``K`` solving ``dK = -K [grad b - sum_i (grad sigma^i)^2] dt - sum_i K grad sigma^i dW^i``."""
    _check_path(state_path, path)
    B, S = linear_coefficients(model, state_path)
    n, dt, d = path.grid.n_steps, path.grid.dt, model.d
    correction = np.einsum("...iab,...ibc->...ac", S, S)
    drift = B - correction
    inc = path.increments
    out = np.empty(B.shape)
    K = np.broadcast_to(np.eye(d), B.shape[:-3] + (d, d)).copy()
    out[..., 0, :, :] = K
    for k in range(n):
        noise = np.einsum("...ab,...ibc,...i->...ac", K, S[..., k, :, :, :], inc[..., k, :])
        K = K - (K @ drift[..., k, :, :]) * dt - noise
        if not np.all(np.isfinite(K)):
            raise DivergenceError(f"non-finite inverse flow at step {k + 1}", step_index=k + 1)
        out[..., k + 1, :, :] = K
    return out


def flow_matrices(model: SdeModel, state_path: StatePath, path: BrownianPath) -> FlowMatrices:
    return FlowMatrices(path.grid, jacobian_flow(model, state_path, path), inverse_flow(model, state_path, path), state_path)


def fundamental_matrix(flow: FlowMatrices, s_index: int, t_index: int) -> np.ndarray:
    """``J_s(t) = J(t) K(s)`` for ``s <= t``."""
    if s_index > t_index:
        raise ValueError(f"fundamental matrix needs s <= t, got s={s_index}, t={t_index}")
    return flow.J[..., t_index, :, :] @ flow.K[..., s_index, :, :]


@dataclass(frozen=True)
class FlowCalibration:
    constant: float
    dts: tuple
    defects: tuple
    slope: float

    def tol(self, dt: float) -> float:
        return flow_tol(dt, self.constant)


def calibrate_flow_tol(model: SdeModel, x0, T: float, n_steps: int, n_paths: int, seed: int, refinements: int = 2) -> FlowCalibration:
    """Fit ``C`` in ``flow_tol`` on the coarsest grid, then measure how the defect scales.

    The defect is the largest ``||K J - I||_F`` over nodes and paths; grids
    are ``n_steps * 2^i`` driven by common Brownian paths.  ``slope`` is the
    log-log rate of the defect against ``dt``.
    """
    finest = n_steps * 2**refinements
    base = sample_ensemble(TimeGrid(T, finest), model.m, seed, n_paths)
    dts, defects = [], []
    for i in range(refinements + 1):
        p = base.coarsen(2 ** (refinements - i))
        sp = solve_sde(model, x0, p)
        defects.append(float(np.max(flow_matrices(model, sp, p).max_identity_defect())))
        dts.append(p.grid.dt)
    C = defects[0] / flow_tol(dts[0])
    slope = fit_loglog(dts, defects)[0] if all(v > 0 for v in defects) else float("nan")
    return FlowCalibration(float(C), tuple(dts), tuple(defects), float(slope))


class DerivativeGrid:
    """Lower-triangular ``D_{t_j} X(t_k)``, ``j <= k``, packed column by column.

    Column ``k`` holds rows ``j = 0..k`` contiguously, so nothing is
    allocated for ``j > k``.  Single path only.
    """

    def __init__(self, grid: TimeGrid, d: int, m: int, state_path: StatePath | None = None, method: str = ""):
        self.grid = grid
        self.d, self.m = d, m
        self.state_path = state_path
        self.method = method
        n = grid.n_steps
        self._offsets = np.arange(n + 2) * (np.arange(n + 2) + 1) // 2
        self.values = np.zeros((int(self._offsets[n + 1]), d, m))

    @property
    def n(self) -> int:
        return self.grid.n_steps

    def column(self, t: int) -> np.ndarray:
        """View of ``D_{t_j} X(t_t)`` for ``j = 0..t``, shape ``(t+1, d, m)``."""
        if not 0 <= t <= self.n:
            raise IndexError(f"time index {t} out of range")
        return self.values[self._offsets[t] : self._offsets[t + 1]]

    def at(self, s: int, t: int) -> np.ndarray:
        if s > t:
            raise IndexError(f"no storage for s > t (s={s}, t={t}); the derivative vanishes there")
        if s < 0:
            raise IndexError(f"negative index {s}")
        return self.column(t)[s]

    def __getitem__(self, key) -> np.ndarray:
        s, t = key
        return self.at(s, t)

    def energy(self, t: int) -> float:
        """Left Riemann sum of ``|D_s X(t)|_F^2`` over ``s in [0, t)``."""
        col = self.column(t)[:t]
        return float(np.sum(col**2) * self.grid.dt)

    def malliavin_matrix(self, t: int) -> np.ndarray:
        """``sum_{j<t} D_j D_j^T dt``: the covariance assembled straight from the grid."""
        col = self.column(t)[:t]
        return np.einsum("jam,jbm->ab", col, col) * self.grid.dt


def malliavin_first(
    model: SdeModel,
    state_path: StatePath,
    path: BrownianPath,
    method: str = "flow",
    flow: FlowMatrices | None = None,
) -> DerivativeGrid:
    """First-order Malliavin derivative on the full triangular grid.

    ``direct`` steps the linear equation of every row ``s`` started from
    ``sigma(X(s))``; ``flow`` evaluates ``J(t) K(s) sigma(X(s))``.
    """
    if method not in ("direct", "flow"):
        raise ValueError(f"method must be 'direct' or 'flow', got {method!r}")
    if path.batch_shape:
        raise ValueError("derivative grids are built one path at a time")
    _check_path(state_path, path)
    n, dt = path.grid.n_steps, path.grid.dt
    grid = DerivativeGrid(path.grid, model.d, model.m, state_path, method)
    sig = model.diffusion(state_path.states)
    if method == "flow":
        if flow is None:
            flow = flow_matrices(model, state_path, path)
        G = flow.K @ sig
        for k in range(n + 1):
            grid.column(k)[:] = np.einsum("ab,jbm->jam", flow.J[k], G[: k + 1])
    else:
        B, S = linear_coefficients(model, state_path)
        inc = path.increments
        grid.column(0)[0] = sig[0]
        for k in range(n):
            Y = grid.column(k)
            nxt = grid.column(k + 1)
            nxt[: k + 1] = _linear_step(Y, B[k], S[k], inc[k], dt)
            nxt[k + 1] = sig[k + 1]
    if not np.all(np.isfinite(grid.values)):
        raise DivergenceError("non-finite first-order Malliavin derivative")
    return grid


def _linear_step(Y, B, S, dW, dt, U=None, V=None):
    """One Euler-Maruyama step of the variational equation for a stack of ``(d, q)`` states."""
    drift = np.einsum("ab,...bq->...aq", B, Y)
    if U is not None:
        drift = drift + U
    noise = np.einsum("iab,...bq,i->...aq", S, Y, dW)
    if V is not None:
        noise = noise + np.einsum("...aqi,i->...aq", V, dW)
    return Y + drift * dt + noise


def malliavin_directional(model: SdeModel, flow: FlowMatrices, hdot: np.ndarray) -> np.ndarray:
    """``M^h(t_k) = sum_{j<k} D_{t_j} X(t_k) hdot_j dt`` via the flow, for every node.

    Works on batched flows; cost is linear in the number of steps.
    """
    sig = model.diffusion(flow.state_path.states)
    dt = flow.grid.dt
    g = np.einsum("...kab,...kbm,km->...ka", flow.K[..., :-1, :, :], sig[..., :-1, :, :], hdot) * dt
    acc = np.concatenate([np.zeros(g.shape[:-2] + (1, g.shape[-1])), np.cumsum(g, axis=-2)], axis=-2)
    return np.einsum("...kab,...kb->...ka", flow.J, acc)


@dataclass
class SecondOrderGrid:
    """``D_{r s} X(t)`` on retained nodes: ``values[a, b, c, i, j, k]`` is component ``i`` of
    ``D^k_{s_b} D^j_{r_a} X(t_c)``; entries with ``t_c < max(r_a, s_b)`` are zero."""

    grid: TimeGrid
    indices: np.ndarray
    values: np.ndarray
    coarsening: int

    def at(self, r: int, s: int, t: int) -> np.ndarray:
        pos = {int(v): i for i, v in enumerate(self.indices)}
        try:
            return self.values[pos[r], pos[s], pos[t]]
        except KeyError as exc:
            raise IndexError(f"node {exc.args[0]} is not on the retained index set") from None

    def energy(self, t: int) -> float:
        """Riemann sum of ``|D_{rs} X(t)|^2`` over retained ``r, s < t`` with cell ``(c dt)^2``."""
        pos = int(np.flatnonzero(self.indices == t)[0])
        keep = self.indices < t
        block = self.values[np.ix_(keep, keep, [pos])]
        h = self.coarsening * self.grid.dt
        return float(np.sum(block**2) * h * h)


def retained_indices(n: int, coarsening: int) -> np.ndarray:
    idx = np.arange(0, n + 1, coarsening)
    if idx[-1] != n:
        idx = np.append(idx, n)
    return idx


def malliavin_second(
    model: SdeModel,
    state_path: StatePath,
    path: BrownianPath,
    first: DerivativeGrid,
    coarsening: int = DEFAULT_COARSENING,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> SecondOrderGrid:
    """Second-order derivative for every retained pair ``(r, s)``.

    Each pair solves the linear variational equation from ``max(r, s)`` with
    forcing ``D^2 b [D_s X, D_r X]`` and ``D^2 sigma^i [D_s X, D_r X]``.  The
    start value is ``grad sigma^j(X(r)) D^k_s X(r)`` when ``r > s`` and
    ``grad sigma^k(X(s)) D^j_r X(s)`` when ``r < s``; on the diagonal the two
    one-sided values are averaged.
    """
    if coarsening < 1:
        raise ValueError("coarsening must be >= 1")
    if path.batch_shape:
        raise ValueError("derivative grids are built one path at a time")
    _check_path(state_path, path)
    n, dt, d, m = path.grid.n_steps, path.grid.dt, model.d, model.m
    idx = retained_indices(n, coarsening)
    R = idx.size
    needed = R**3 * d * m * m
    if needed > memory_budget:
        raise MemoryBudgetError(
            f"second-order grid needs {needed} entries (budget {memory_budget}); use a larger coarsening"
        )
    X = state_path.states
    B, S = linear_coefficients(model, state_path)
    DJ = model.diffusion_jacobian(X)  # (n+1, d, m, d)
    H = model.drift_hessian(X)  # (n+1, d, d, d)
    DH = model.diffusion_hessian(X)  # (n+1, d, m, d, d)
    sig = model.diffusion(X)

    ra, sb = np.meshgrid(np.arange(R), np.arange(R), indexing="ij")
    ra, sb = ra.ravel(), sb.ravel()
    r_node, s_node = idx[ra], idx[sb]
    start = np.maximum(r_node, s_node)
    P = ra.size

    alpha = np.empty((P, d, m, m))
    for p in range(P):
        r, s = r_node[p], s_node[p]
        if r > s:
            alpha[p] = np.einsum("ajb,bk->ajk", DJ[r], first.at(s, r))
        elif r < s:
            alpha[p] = np.einsum("akb,bj->ajk", DJ[s], first.at(r, s))
        else:
            alpha[p] = 0.5 * (np.einsum("ajb,bk->ajk", DJ[r], sig[r]) + np.einsum("akb,bj->ajk", DJ[r], sig[r]))

    t_pos = {int(v): i for i, v in enumerate(idx)}
    values = np.zeros((R, R, R, d, m, m))
    Y = np.zeros((P, d, m, m))
    inc = path.increments
    for u in range(n + 1):
        fresh = np.flatnonzero(start == u)
        Y[fresh] = alpha[fresh]
        act = np.flatnonzero(start <= u)
        if u in t_pos:
            values[ra[act], sb[act], t_pos[u]] = Y[act]
        if u == n or act.size == 0:
            continue
        col = first.column(u)
        Dr, Ds = col[r_node[act]], col[s_node[act]]  # (P', d, m)
        U = np.einsum("abc,pbk,pcj->pajk", H[u], Ds, Dr)
        V = np.einsum("aibc,pbk,pcj->pajki", DH[u], Ds, Dr)
        Ya = Y[act].reshape(act.size, d, m * m)
        nxt = _linear_step(Ya, B[u], S[u], inc[u], dt, U.reshape(act.size, d, m * m), V.reshape(act.size, d, m * m, m))
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"non-finite second-order derivative at step {u + 1}", step_index=u + 1)
        Y[act] = nxt.reshape(act.size, d, m, m)
    return SecondOrderGrid(path.grid, idx, values, coarsening)
