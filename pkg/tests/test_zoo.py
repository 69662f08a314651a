from __future__ import annotations

import numpy as np
import pytest

from monosde.zoo import DVDP_BOX, LORENZ_BOX, ZOO, default_x0, model_zoo
from monosde.model import validate_assumptions


def test_brownian():
    m = model_zoo("brownian")
    assert (m.d, m.m) == (1, 1)
    assert m.drift(np.array([3.0])).tolist() == [0.0]
    assert m.diffusion(np.array([3.0])).tolist() == [[1.0]]


def test_ginzburg_landau_wiring():
    m = model_zoo("ginzburg_landau", {"eta": 1.0, "c": 0.5})
    x = np.array([2.0])
    np.testing.assert_allclose(m.drift(x), [-6.0])
    np.testing.assert_allclose(m.diffusion(x), [[1.0]])
    np.testing.assert_allclose(m.drift_jacobian(x), [[-11.0]])
    np.testing.assert_allclose(m.drift_hessian(x), [[[-12.0]]])
    np.testing.assert_allclose(m.drift_third(x), [[[[-6.0]]]])


def test_kinetic_wiring():
    m = model_zoo("kinetic")
    x = np.array([0.7, -3.0])
    assert (m.d, m.m) == (2, 1)
    np.testing.assert_array_equal(m.diffusion(x), [[1.0], [0.0]])
    np.testing.assert_array_equal(m.drift(x), [0.0, 0.7])


@pytest.mark.parametrize("name,params", [("nope", {}), ("gbm", {"sigma": 1.0}), ("lorenz", {"noise": -1.0}), ("ou", {"dim": 0})])
def test_rejects_bad_requests(name, params):
    with pytest.raises(ValueError):
        model_zoo(name, params)


@pytest.mark.parametrize("name", sorted(ZOO))
def test_default_x0_dimension(name):
    m = model_zoo(name)
    assert default_x0(name, m).shape == (m.d,)


@pytest.mark.parametrize("name", ["duffing_van_der_pol", "lorenz"])
def test_box_local_constant_covers_samples(name):
    m = model_zoo(name)
    box = DVDP_BOX if name == "duffing_van_der_pol" else LORENZ_BOX
    rep = validate_assumptions(m, box, 3000, rng_seed=4)
    assert rep.constant_L <= m.monotone_constant + 1e-9
