from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monosde.paths import (
    BrownianPath,
    CameronMartinDirection,
    TimeGrid,
    cameron_martin_check,
    doleans_exponential,
    sample_brownian,
    sample_ensemble,
    shift_path,
)
from monosde.csvio import read_csv


def test_grid_nodes():
    g = TimeGrid(2.0, 8)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 2.0
    assert np.all(np.diff(g.nodes) > 0)


@pytest.mark.parametrize("T,n", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5)])
def test_grid_rejects(T, n):
    with pytest.raises(ValueError):
        TimeGrid(T, n)


def test_same_stream_bit_identical():
    g = TimeGrid(1.0, 64)
    a, b = sample_brownian(g, 2, 7, 11), sample_brownian(g, 2, 7, 11)
    assert a.increments.tobytes() == b.increments.tobytes()


def test_streams_differ():
    g = TimeGrid(1.0, 64)
    assert not np.array_equal(sample_brownian(g, 1, 0, 0).increments, sample_brownian(g, 1, 1, 0).increments)


def test_ensemble_order_independent():
    g = TimeGrid(1.0, 16)
    ens = sample_ensemble(g, 1, 5, [3, 1, 2])
    np.testing.assert_array_equal(ens[1].increments, sample_brownian(g, 1, 1, 5).increments)


@pytest.fixture(scope="module")
def big_ensemble():
    return sample_ensemble(TimeGrid(1.0, 4), 1, 0, 100_000)


def test_terminal_mean(big_ensemble):
    wT = big_ensemble.values[:, -1, 0]
    assert abs(wT.mean()) <= 4 * np.sqrt(1.0 / 1e5)


def test_terminal_variance(big_ensemble):
    wT = big_ensemble.values[:, -1, 0]
    assert abs(wT.var(ddof=1) - 1.0) <= 0.05


def test_reconstruction_exact():
    p = sample_brownian(TimeGrid(1.0, 100), 3, 0, 0)
    assert p.values[0].tolist() == [0.0, 0.0, 0.0]
    for k in range(1, 101):
        assert np.array_equal(p.values[k], np.cumsum(p.increments, axis=0)[k - 1])


def test_values_read_only():
    p = sample_brownian(TimeGrid(1.0, 4), 1, 0, 0)
    with pytest.raises(ValueError):
        p.increments[0, 0] = 1.0


def test_coarsen_sums_blocks():
    p = sample_brownian(TimeGrid(1.0, 8), 1, 0, 0)
    c = p.coarsen(4)
    np.testing.assert_allclose(c.values, p.values[::4], atol=1e-15)


def test_shift_zero_is_identity():
    p = sample_brownian(TimeGrid(1.0, 10), 1, 0, 0)
    h = CameronMartinDirection.constant(p.grid, 2.0)
    np.testing.assert_array_equal(shift_path(p, h, 0.0).increments, p.increments)


def test_shift_constant():
    p = sample_brownian(TimeGrid(1.0, 10), 1, 0, 0)
    h = CameronMartinDirection.constant(p.grid, 0.3)
    q = shift_path(p, h, 2.0)
    np.testing.assert_allclose(q.values[:, 0], p.values[:, 0] + 0.6 * p.grid.nodes, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_shift_group(e1, e2, stream):
    p = sample_brownian(TimeGrid(1.0, 16), 2, stream, 0)
    h = CameronMartinDirection.from_primitive(p.grid, lambda t: np.stack([np.sin(t), t**2], axis=-1))
    a = shift_path(p, h, e1 + e2)
    b = shift_path(shift_path(p, h, e1), h, e2)
    np.testing.assert_allclose(a.values, b.values, atol=1e-13)
    back = shift_path(shift_path(p, h, e1), h, -e1)
    np.testing.assert_allclose(back.increments, p.increments, atol=1e-14)


def test_shift_grid_mismatch():
    p = sample_brownian(TimeGrid(1.0, 10), 1, 0, 0)
    with pytest.raises(ValueError):
        shift_path(p, CameronMartinDirection.constant(TimeGrid(1.0, 20), 1.0), 1.0)


def test_direction_primitive_and_norm():
    g = TimeGrid(2.0, 4)
    h = CameronMartinDirection.constant(g, [1.0, -2.0])
    assert h.primitive[0].tolist() == [0.0, 0.0]
    np.testing.assert_allclose(h.primitive[-1], [2.0, -4.0])
    assert h.norm == pytest.approx(np.sqrt(5 * 2.0))


def test_doleans_zero_direction():
    p = sample_brownian(TimeGrid(1.0, 10), 1, 0, 0)
    np.testing.assert_array_equal(doleans_exponential(p, CameronMartinDirection.constant(p.grid, 0.0)), 1.0)


def test_doleans_closed_form():
    p = sample_brownian(TimeGrid(1.0, 50), 1, 3, 0)
    c, w = 0.7, p.values[-1, 0]
    e = doleans_exponential(p, CameronMartinDirection.constant(p.grid, c))
    assert e[-1] == pytest.approx(np.exp(c * w - 0.5 * c * c))


@settings(max_examples=20, deadline=None)
@given(st.floats(-40, 40))
def test_doleans_positive(c):
    p = sample_ensemble(TimeGrid(1.0, 8), 1, 0, 10)
    assert np.all(doleans_exponential(p, CameronMartinDirection.constant(p.grid, c)) > 0)


def test_doleans_martingale_mean():
    p = sample_ensemble(TimeGrid(1.0, 4), 1, 1, 100_000)
    e = doleans_exponential(p, CameronMartinDirection.constant(p.grid, 1.0))[:, -1]
    assert abs(e.mean() - 1.0) <= 4 * e.std(ddof=1) / np.sqrt(e.size)


@pytest.mark.parametrize(
    "name,F,target",
    [
        ("one", lambda p: np.ones(p.batch_shape), 1.0),
        ("W(T)", lambda p: p.values[..., -1, 0], 0.8),
        # E[(W + c)^2] = 1 + c^2 at T = 1
        ("W(T)^2", lambda p: p.values[..., -1, 0] ** 2, 1.64),
    ],
)
def test_cameron_martin_examples(name, F, target):
    h = CameronMartinDirection.constant(TimeGrid(1.0, 8), 0.8)
    res = cameron_martin_check(F, h, 20_000, seed=2)
    assert res.passed
    assert res.hits(target)
    if name == "one":
        assert res.lhs == 1.0


def test_csv_export_roundtrip(tmp_path):
    p = sample_brownian(TimeGrid(1.0, 5), 2, 0, 0)
    p.to_csv(tmp_path / "w.csv")
    header, rows = read_csv(tmp_path / "w.csv")
    assert header == ["t", "W1", "W2"]
    vals = np.array(rows, dtype=float)
    np.testing.assert_array_equal(vals[:, 1:], p.values)
    np.testing.assert_array_equal(vals[:, 0], p.grid.nodes)


def test_increment_shape_checked():
    with pytest.raises(ValueError):
        BrownianPath(TimeGrid(1.0, 4), np.zeros((5, 1)))
