"""Uniform time grids, Brownian paths, Cameron-Martin shifts and the Girsanov density.

Path containers carry an optional leading batch axis so an ensemble of
paths can be pushed through the integrators in one vectorised sweep:
``increments`` has shape ``(n_steps, m)`` for one path and
``(n_paths, n_steps, m)`` for an ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np

from .csvio import write_csv

Z99 = NormalDist().inv_cdf(0.995)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not (self.T > 0 and np.isfinite(self.T)):
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.n_steps % factor:
            raise ValueError(f"{factor} does not divide {self.n_steps}")
        return TimeGrid(self.T, self.n_steps // factor)


@dataclass(frozen=True)
class BrownianPath:
    grid: TimeGrid
    increments: np.ndarray
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim < 2 or inc.shape[-2] != self.grid.n_steps:
            raise ValueError(f"increments must have shape (..., {self.grid.n_steps}, m), got {inc.shape}")
        inc.setflags(write=False)
        vals = np.concatenate([np.zeros(inc.shape[:-2] + (1, inc.shape[-1])), np.cumsum(inc, axis=-2)], axis=-2)
        vals.setflags(write=False)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "values", vals)

    @property
    def m(self) -> int:
        return self.increments.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.increments.shape[:-2]

    def __len__(self) -> int:
        if not self.batch_shape:
            raise TypeError("single path has no length")
        return self.batch_shape[0]

    def __getitem__(self, idx) -> "BrownianPath":
        if not self.batch_shape:
            raise TypeError("cannot index a single path")
        return BrownianPath(self.grid, self.increments[idx])

    def coarsen(self, factor: int) -> "BrownianPath":
        """The same Brownian path observed on a grid ``factor`` times coarser."""
        grid = self.grid.coarsen(factor)
        inc = self.increments.reshape(self.batch_shape + (grid.n_steps, factor, self.m)).sum(axis=-2)
        return BrownianPath(grid, inc)

    def to_csv(self, path) -> None:
        if self.batch_shape:
            raise ValueError("export one path at a time")
        t = self.grid.nodes
        rows = ([t[k], *self.values[k]] for k in range(len(t)))
        write_csv(path, ["t"] + [f"W{i + 1}" for i in range(self.m)], rows)


@dataclass(frozen=True)
class CameronMartinDirection:
    """Piecewise-constant density ``hdot`` (shape ``(n_steps, m)``) on a grid."""

    grid: TimeGrid
    hdot: np.ndarray

    def __post_init__(self):
        hd = np.asarray(self.hdot, dtype=float)
        if hd.ndim != 2 or hd.shape[0] != self.grid.n_steps:
            raise ValueError(f"hdot must have shape ({self.grid.n_steps}, m), got {hd.shape}")
        if not np.all(np.isfinite(hd)):
            raise ValueError("hdot must be finite")
        hd.setflags(write=False)
        object.__setattr__(self, "hdot", hd)

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "CameronMartinDirection":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.broadcast_to(value, (grid.n_steps, value.size)).copy())

    @classmethod
    def from_primitive(cls, grid: TimeGrid, h: Callable[[np.ndarray], np.ndarray]) -> "CameronMartinDirection":
        """L2 projection of ``h'`` onto cell-wise constants: cell averages of the density."""
        vals = np.asarray(h(grid.nodes), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return cls(grid, np.diff(vals, axis=0) / grid.dt)

    @property
    def m(self) -> int:
        return self.hdot.shape[1]

    @property
    def primitive(self) -> np.ndarray:
        """``h(t_k)`` at every node, shape ``(n_steps + 1, m)``."""
        return np.concatenate([np.zeros((1, self.m)), np.cumsum(self.hdot * self.grid.dt, axis=0)])

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.hdot**2) * self.grid.dt))


def _stream_generator(seed: int, stream_id: int) -> np.random.Generator:
    # Philox is counter-based: the key (seed, stream_id) fully determines the stream
    key = np.array([seed, stream_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def stream_normals(seed: int, stream_id: int, shape: tuple) -> np.ndarray:
    return _stream_generator(seed, stream_id).standard_normal(shape)


def sample_brownian(grid: TimeGrid, m: int, stream_id: int, seed: int) -> BrownianPath:
    """One path; bit-identical for equal ``(seed, stream_id)``."""
    z = stream_normals(seed, stream_id, (grid.n_steps, m))
    return BrownianPath(grid, z * np.sqrt(grid.dt))


def sample_ensemble(grid: TimeGrid, m: int, seed: int, stream_ids: Sequence[int] | int) -> BrownianPath:
    """Batched paths, one per stream id (an int ``n`` means streams ``0..n-1``)."""
    if isinstance(stream_ids, (int, np.integer)):
        stream_ids = range(int(stream_ids))
    sq = np.sqrt(grid.dt)
    inc = np.stack([stream_normals(seed, int(s), (grid.n_steps, m)) for s in stream_ids]) * sq
    return BrownianPath(grid, inc)


def _check_same_grid(path: BrownianPath, h: CameronMartinDirection) -> None:
    if path.grid != h.grid:
        raise ValueError(f"grid mismatch: path on {path.grid}, direction on {h.grid}")
    if path.m != h.m:
        raise ValueError(f"noise dimension mismatch: path m={path.m}, direction m={h.m}")


def shift_path(path: BrownianPath, h: CameronMartinDirection, eps: float) -> BrownianPath:
    """``omega + eps * h``: each increment gains ``eps * hdot_k * dt``."""
    _check_same_grid(path, h)
    return BrownianPath(path.grid, path.increments + eps * h.hdot * path.grid.dt)


def doleans_exponential(path: BrownianPath, h: CameronMartinDirection, log: bool = False) -> np.ndarray:
    """``exp(int hdot dW - 1/2 int |hdot|^2 ds)`` at every node, built in log space.

    With ``log=True`` the exponent itself is returned.  Values that would
    underflow are held at the smallest positive double so the result stays
    strictly positive.
    """
    _check_same_grid(path, h)
    dt = path.grid.dt
    step = np.sum(h.hdot * path.increments, axis=-1) - 0.5 * np.sum(h.hdot**2, axis=-1) * dt
    log_e = np.concatenate([np.zeros(path.batch_shape + (1,)), np.cumsum(step, axis=-1)], axis=-1)
    if log:
        return log_e
    return np.maximum(np.exp(log_e), np.finfo(float).tiny)


@dataclass
class CameronMartinResult:
    lhs: float
    rhs: float
    ci: float
    ci_lhs: float
    ci_rhs: float
    n_paths: int

    @property
    def passed(self) -> bool:
        return abs(self.lhs - self.rhs) <= self.ci

    def hits(self, target: float) -> bool:
        return abs(self.lhs - target) <= self.ci_lhs and abs(self.rhs - target) <= self.ci_rhs


def _half_width(samples: np.ndarray) -> float:
    n = samples.shape[0]
    return float(Z99 * np.std(samples, ddof=1) / np.sqrt(n))


def cameron_martin_check(
    F: Callable[[BrownianPath], np.ndarray],
    h: CameronMartinDirection,
    n_paths: int,
    seed: int,
) -> CameronMartinResult:
    """Compare ``E[F(omega + h)]`` with ``E[F(omega) E(hdot)(T)]`` on common paths.

    ``F`` maps a batched path to one value per path.  ``ci`` is the 99%
    half-width of the paired difference; ``ci_lhs``/``ci_rhs`` are the
    half-widths of each side alone.
    """
    paths = sample_ensemble(h.grid, h.m, seed, n_paths)
    shifted = np.asarray(F(shift_path(paths, h, 1.0)), dtype=float)
    weighted = np.asarray(F(paths), dtype=float) * doleans_exponential(paths, h)[..., -1]
    return CameronMartinResult(
        lhs=float(np.mean(shifted)),
        rhs=float(np.mean(weighted)),
        ci=_half_width(shifted - weighted),
        ci_lhs=_half_width(shifted),
        ci_rhs=_half_width(weighted),
        n_paths=n_paths,
    )
