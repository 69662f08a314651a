"""Named models with analytic derivatives, as selectable from the CLI config."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .model import SdeModel


def _zeros(x, *shape):
    return np.zeros(np.shape(x)[:-1] + shape)


def _box_monotone_constant(jac: Callable, lower, upper, points: int = 41) -> float:
    """Largest eigenvalue of the symmetrised drift Jacobian over a grid on a box."""
    axes = [np.linspace(lo, hi, points) for lo, hi in zip(lower, upper)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    j = jac(grid)
    sym = 0.5 * (j + np.swapaxes(j, -1, -2))
    return float(np.max(np.linalg.eigvalsh(sym)[..., -1]))


def ginzburg_landau(eta: float = 1.0, c: float = 0.5) -> SdeModel:
    """``dX = (eta X - X^3) dt + c X dW`` in one dimension."""
    return SdeModel(
        d=1,
        m=1,
        drift=lambda x: eta * x - x**3,
        diffusion=lambda x: c * x[..., None],
        drift_derivs={
            1: lambda x: (eta - 3.0 * x**2)[..., None],
            2: lambda x: (-6.0 * x)[..., None, None],
            3: lambda x: np.full(np.shape(x) + (1, 1, 1), -6.0),
        },
        diffusion_derivs={
            1: lambda x: np.full(np.shape(x) + (1, 1), c),
            2: lambda x: _zeros(x, 1, 1, 1, 1),
        },
        name="ginzburg_landau",
        params={"eta": eta, "c": c},
        monotone_constant=max(eta, 0.0),
        growth_exponent=3.0,
    )


DVDP_BOX = ((-3.0, -3.0), (3.0, 3.0))


def duffing_van_der_pol(a1: float = 1.0, a2: float = 1.0, a3: float = 1.0, beta: float = 0.5) -> SdeModel:
    """Stochastic Duffing-van der Pol oscillator with multiplicative noise on the velocity.

    ``dX1 = X2 dt``, ``dX2 = (a1 X1 - a2 X2 - a3 X1^2 X2 - X1^3) dt + beta X1 dW``.
    The drift is only locally one-sided Lipschitz; ``monotone_constant`` is
    the box-local value on ``DVDP_BOX``.
    """

    def drift(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, a1 * x1 - a2 * x2 - a3 * x1**2 * x2 - x1**3], axis=-1)

    def diffusion(x):
        out = _zeros(x, 2, 1)
        out[..., 1, 0] = beta * x[..., 0]
        return out

    def jac(x):
        x1, x2 = x[..., 0], x[..., 1]
        out = _zeros(x, 2, 2)
        out[..., 0, 1] = 1.0
        out[..., 1, 0] = a1 - 2.0 * a3 * x1 * x2 - 3.0 * x1**2
        out[..., 1, 1] = -a2 - a3 * x1**2
        return out

    def hess(x):
        x1, x2 = x[..., 0], x[..., 1]
        out = _zeros(x, 2, 2, 2)
        out[..., 1, 0, 0] = -2.0 * a3 * x2 - 6.0 * x1
        out[..., 1, 0, 1] = -2.0 * a3 * x1
        out[..., 1, 1, 0] = -2.0 * a3 * x1
        return out

    def third(x):
        out = _zeros(x, 2, 2, 2, 2)
        out[..., 1, 0, 0, 0] = -6.0
        for idx in ((0, 0, 1), (0, 1, 0), (1, 0, 0)):
            out[(..., 1) + idx] = -2.0 * a3
        return out

    def diff_jac(x):
        out = _zeros(x, 2, 1, 2)
        out[..., 1, 0, 0] = beta
        return out

    return SdeModel(
        d=2,
        m=1,
        drift=drift,
        diffusion=diffusion,
        drift_derivs={1: jac, 2: hess, 3: third},
        diffusion_derivs={1: diff_jac, 2: lambda x: _zeros(x, 2, 1, 2, 2)},
        name="duffing_van_der_pol",
        params={"a1": a1, "a2": a2, "a3": a3, "beta": beta},
        monotone_constant=_box_monotone_constant(jac, *DVDP_BOX),
        growth_exponent=3.0,
    )


LORENZ_BOX = ((-30.0, -30.0, -10.0), (30.0, 30.0, 60.0))


def lorenz(s: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0, noise: float = 1.0) -> SdeModel:
    """Lorenz system with additive noise ``noise * I_3``; box-local monotone constant."""

    def drift(x):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([s * (x2 - x1), x1 * (rho - x3) - x2, x1 * x2 - beta * x3], axis=-1)

    def jac(x):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        out = _zeros(x, 3, 3)
        out[..., 0, 0] = -s
        out[..., 0, 1] = s
        out[..., 1, 0] = rho - x3
        out[..., 1, 1] = -1.0
        out[..., 1, 2] = -x1
        out[..., 2, 0] = x2
        out[..., 2, 1] = x1
        out[..., 2, 2] = -beta
        return out

    def hess(x):
        out = _zeros(x, 3, 3, 3)
        out[..., 1, 0, 2] = out[..., 1, 2, 0] = -1.0
        out[..., 2, 0, 1] = out[..., 2, 1, 0] = 1.0
        return out

    return SdeModel(
        d=3,
        m=3,
        drift=drift,
        diffusion=lambda x: np.broadcast_to(noise * np.eye(3), np.shape(x)[:-1] + (3, 3)).copy(),
        drift_derivs={1: jac, 2: hess, 3: lambda x: _zeros(x, 3, 3, 3, 3)},
        diffusion_derivs={1: lambda x: _zeros(x, 3, 3, 3), 2: lambda x: _zeros(x, 3, 3, 3, 3)},
        name="lorenz",
        params={"s": s, "rho": rho, "beta": beta, "noise": noise},
        monotone_constant=_box_monotone_constant(jac, *LORENZ_BOX, points=11),
        growth_exponent=2.0,
    )


def gbm(mu: float = 0.05, c: float = 0.2) -> SdeModel:
    """Geometric Brownian motion ``dX = mu X dt + c X dW``."""
    return SdeModel(
        d=1,
        m=1,
        drift=lambda x: mu * x,
        diffusion=lambda x: c * x[..., None],
        drift_derivs={
            1: lambda x: np.full(np.shape(x) + (1,), mu),
            2: lambda x: _zeros(x, 1, 1, 1),
            3: lambda x: _zeros(x, 1, 1, 1, 1),
        },
        diffusion_derivs={
            1: lambda x: np.full(np.shape(x) + (1, 1), c),
            2: lambda x: _zeros(x, 1, 1, 1, 1),
        },
        name="gbm",
        params={"mu": mu, "c": c},
        monotone_constant=mu,
        globally_lipschitz=True,
        growth_exponent=1.0,
    )


def ou(theta: float = 1.0, mean: float = 0.0, noise: float = 1.0, dim: int = 1) -> SdeModel:
    """Ornstein-Uhlenbeck ``dX = theta (mean - X) dt + noise dW`` in ``dim`` dimensions."""
    d = int(dim)
    eye = np.eye(d)
    return SdeModel(
        d=d,
        m=d,
        drift=lambda x: theta * (mean - x),
        diffusion=lambda x: np.broadcast_to(noise * eye, np.shape(x)[:-1] + (d, d)).copy(),
        drift_derivs={
            1: lambda x: np.broadcast_to(-theta * eye, np.shape(x)[:-1] + (d, d)).copy(),
            2: lambda x: _zeros(x, d, d, d),
            3: lambda x: _zeros(x, d, d, d, d),
        },
        diffusion_derivs={1: lambda x: _zeros(x, d, d, d), 2: lambda x: _zeros(x, d, d, d, d)},
        name="ou",
        params={"theta": theta, "mean": mean, "noise": noise, "dim": d},
        monotone_constant=-theta,
        globally_lipschitz=True,
        growth_exponent=1.0,
    )


def brownian(dim: int = 1, scale: float = 1.0) -> SdeModel:
    """``X = x + scale * W`` with ``d = m = dim``."""
    d = int(dim)
    eye = np.eye(d)
    return SdeModel(
        d=d,
        m=d,
        drift=lambda x: np.zeros_like(x),
        diffusion=lambda x: np.broadcast_to(scale * eye, np.shape(x)[:-1] + (d, d)).copy(),
        drift_derivs={
            1: lambda x: _zeros(x, d, d),
            2: lambda x: _zeros(x, d, d, d),
            3: lambda x: _zeros(x, d, d, d, d),
        },
        diffusion_derivs={1: lambda x: _zeros(x, d, d, d), 2: lambda x: _zeros(x, d, d, d, d)},
        name="brownian",
        params={"dim": d, "scale": scale},
        monotone_constant=0.0,
        globally_lipschitz=True,
        growth_exponent=1.0,
    )


def kinetic(noise: float = 1.0) -> SdeModel:
    """``dX1 = noise dW``, ``dX2 = X1 dt``: noise reaches X2 only through the drift."""

    def drift(x):
        return np.stack([np.zeros_like(x[..., 0]), x[..., 0]], axis=-1)

    def diffusion(x):
        out = _zeros(x, 2, 1)
        out[..., 0, 0] = noise
        return out

    def jac(x):
        out = _zeros(x, 2, 2)
        out[..., 1, 0] = 1.0
        return out

    return SdeModel(
        d=2,
        m=1,
        drift=drift,
        diffusion=diffusion,
        drift_derivs={1: jac, 2: lambda x: _zeros(x, 2, 2, 2), 3: lambda x: _zeros(x, 2, 2, 2, 2)},
        diffusion_derivs={1: lambda x: _zeros(x, 2, 1, 2), 2: lambda x: _zeros(x, 2, 1, 2, 2)},
        name="kinetic",
        params={"noise": noise},
        monotone_constant=0.5,
        globally_lipschitz=True,
        growth_exponent=1.0,
    )


ZOO: dict[str, Callable[..., SdeModel]] = {
    "ginzburg_landau": ginzburg_landau,
    "duffing_van_der_pol": duffing_van_der_pol,
    "lorenz": lorenz,
    "gbm": gbm,
    "ou": ou,
    "brownian": brownian,
    "kinetic": kinetic,
}

NOISE_PARAMS = {
    "ginzburg_landau": "c",
    "duffing_van_der_pol": "beta",
    "lorenz": "noise",
    "gbm": "c",
    "ou": "noise",
    "brownian": "scale",
    "kinetic": "noise",
}

DEFAULT_X0 = {
    "ginzburg_landau": [1.0],
    "duffing_van_der_pol": [1.0, 0.0],
    "lorenz": [1.0, 1.0, 1.0],
    "gbm": [1.0],
    "ou": None,
    "brownian": None,
    "kinetic": [0.0, 0.0],
}


def model_zoo(name: str, params: Mapping[str, float] | None = None) -> SdeModel:
    """Build a zoo model by name; unknown names or parameters raise ``ValueError``."""
    if name not in ZOO:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(ZOO)}")
    params = dict(params or {})
    builder = ZOO[name]
    allowed = builder.__code__.co_varnames[: builder.__code__.co_argcount]
    unknown = sorted(set(params) - set(allowed))
    if unknown:
        raise ValueError(f"unknown parameter(s) {unknown} for model {name!r}; allowed: {list(allowed)}")
    for key, value in params.items():
        if not np.isfinite(float(value)):
            raise ValueError(f"parameter {key!r} must be finite")
    noise_key = NOISE_PARAMS[name]
    if float(params.get(noise_key, 0.0)) < 0:
        raise ValueError(f"noise scale {noise_key!r} must be non-negative")
    if "dim" in params and (int(params["dim"]) != params["dim"] or int(params["dim"]) < 1):
        raise ValueError("dim must be a positive integer")
    return builder(**params)


def default_x0(name: str, model: SdeModel) -> np.ndarray:
    x0 = DEFAULT_X0.get(name)
    return np.zeros(model.d) if x0 is None else np.array(x0, dtype=float)
