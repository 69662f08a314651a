from __future__ import annotations

import numpy as np
import pytest

from monosde.model import SdeModel


def _z(x, *shape):
    return np.zeros(np.shape(x)[:-1] + shape)


def linear_model(A, S=None, m=None) -> SdeModel:
    """``b(x) = A x`` with constant diffusion ``S`` (d x m)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    S = np.zeros((d, m or d)) if S is None else np.atleast_2d(np.asarray(S, dtype=float))
    m = S.shape[1]
    return SdeModel(
        d=d,
        m=m,
        drift=lambda x: x @ A.T,
        diffusion=lambda x: np.broadcast_to(S, np.shape(x)[:-1] + (d, m)).copy(),
        drift_derivs={
            1: lambda x: np.broadcast_to(A, np.shape(x)[:-1] + (d, d)).copy(),
            2: lambda x: _z(x, d, d, d),
            3: lambda x: _z(x, d, d, d, d),
        },
        diffusion_derivs={1: lambda x: _z(x, d, m, d), 2: lambda x: _z(x, d, m, d, d)},
        name="linear",
        monotone_constant=float(np.max(np.linalg.eigvalsh(0.5 * (A + A.T)))),
        globally_lipschitz=True,
    )


def cubic_model(a: float = 0.0) -> SdeModel:
    """``b(x) = a x - x^3``, no noise."""
    return SdeModel(
        d=1,
        m=1,
        drift=lambda x: a * x - x**3,
        diffusion=lambda x: _z(x, 1, 1),
        drift_derivs={
            1: lambda x: (a - 3 * x**2)[..., None],
            2: lambda x: (-6 * x)[..., None, None],
            3: lambda x: np.full(np.shape(x) + (1, 1, 1), -6.0),
        },
        diffusion_derivs={1: lambda x: _z(x, 1, 1, 1), 2: lambda x: _z(x, 1, 1, 1, 1)},
        name="cubic",
        monotone_constant=max(a, 0.0),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
