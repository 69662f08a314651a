"""SDE model type, derivative oracles and sampled checks of the standing assumptions.

A model describes ``dX = b(X) dt + sigma(X) dW`` with ``b: R^d -> R^d`` and
``sigma: R^d -> R^{d x m}``.  Every callable is vectorised: it accepts an
array of shape ``(..., d)`` and returns ``(..., d)`` (drift) or
``(..., d, m)`` (diffusion).

Derivative tensors use the "output indices first" convention::

    drift order k:      (..., d, d, ..., d)      [i, j1, .., jk] = d^k b_i / dx_j1 .. dx_jk
    diffusion order k:  (..., d, m, d, ..., d)   [i, l, j1, .., jk] = d^k sigma_il / dx_j1 ..
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ModelEvaluationError

EPS = np.finfo(float).eps

DERIV_MODES = ("analytic", "forward-AD", "finite-difference")
MAX_DRIFT_ORDER = 3
MAX_DIFFUSION_ORDER = 2

# relative tolerance between analytic and finite-difference derivatives, per order
TOL_FD = {1: 1e-6, 2: 1e-5, 3: 1e-4}


def fd_step(order: int) -> float:
    """Relative central-difference step for a derivative of the given order."""
    return EPS ** (1.0 / (order + 2))


@dataclass(frozen=True)
class SdeModel:
    """Drift, diffusion and their derivative oracles.

    ``monotone_constant`` is the constant ``L`` of the one-sided Lipschitz
    bound used to check implicit-step solvability (``dt * L < 1``); ``None``
    means unknown and disables the check.
    """

    d: int
    m: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    deriv_mode: str = "analytic"
    drift_derivs: Mapping[int, Callable] = field(default_factory=dict)
    diffusion_derivs: Mapping[int, Callable] = field(default_factory=dict)
    name: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)
    monotone_constant: float | None = None
    globally_lipschitz: bool = False
    growth_exponent: float | None = None

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError(f"dimensions must be positive, got d={self.d}, m={self.m}")
        if self.deriv_mode not in DERIV_MODES:
            raise ValueError(f"deriv_mode must be one of {DERIV_MODES}, got {self.deriv_mode!r}")
        bad = [k for k in self.drift_derivs if k not in (1, 2, 3)]
        bad += [k for k in self.diffusion_derivs if k not in (1, 2)]
        if bad:
            raise ValueError(f"unsupported analytic derivative orders: {bad}")

    # -- derivative tensors -------------------------------------------------

    def derivative(self, target: str, order: int, x) -> np.ndarray:
        """Full derivative tensor of ``b`` or ``sigma`` at ``x`` (batched)."""
        if target not in ("drift", "diffusion"):
            raise ValueError(f"unknown derivative target {target!r}")
        max_order = MAX_DRIFT_ORDER if target == "drift" else MAX_DIFFUSION_ORDER
        if not 1 <= order <= max_order:
            raise ValueError(f"{target} derivatives are supported up to order {max_order}, got {order}")
        x = np.asarray(x, dtype=float)
        fn = self.drift if target == "drift" else self.diffusion
        analytic = (self.drift_derivs if target == "drift" else self.diffusion_derivs).get(order)
        if self.deriv_mode == "analytic" and analytic is not None:
            return np.asarray(analytic(x), dtype=float)
        if self.deriv_mode == "forward-AD":
            return _jax_tensor(fn, x, order)
        return fd_tensor(fn, x, order)

    def drift_jacobian(self, x) -> np.ndarray:
        return self.derivative("drift", 1, x)

    def drift_hessian(self, x) -> np.ndarray:
        return self.derivative("drift", 2, x)

    def drift_third(self, x) -> np.ndarray:
        return self.derivative("drift", 3, x)

    def diffusion_jacobian(self, x) -> np.ndarray:
        return self.derivative("diffusion", 1, x)

    def diffusion_hessian(self, x) -> np.ndarray:
        return self.derivative("diffusion", 2, x)

    def with_mode(self, deriv_mode: str) -> "SdeModel":
        from dataclasses import replace

        return replace(self, deriv_mode=deriv_mode)


# -- finite differences -------------------------------------------------------


def _step_for(x: np.ndarray, order: int) -> np.ndarray:
    scale = 1.0 + np.linalg.norm(x, axis=-1, keepdims=True)
    return fd_step(order) * scale


def fd_tensor(fn: Callable, x: np.ndarray, order: int) -> np.ndarray:
    """Central-difference derivative tensor of ``fn`` (batched over leading axes of x)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    h = _step_for(x, order)
    eye = np.eye(d)
    f0 = np.asarray(fn(x))
    out = np.empty(f0.shape + (d,) * order)
    hk = h.reshape(h.shape[:-1] + (1,) * (f0.ndim - x.ndim + 1))
    for idx in itertools.product(range(d), repeat=order):
        acc = np.zeros_like(f0)
        for signs in itertools.product((1.0, -1.0), repeat=order):
            shift = sum(s * eye[j] for s, j in zip(signs, idx))
            acc = acc + np.prod(signs) * np.asarray(fn(x + h * shift))
        out[(...,) + idx] = acc / (2.0 * hk) ** order
    return out


def fd_directional(fn: Callable, x: np.ndarray, directions: Sequence[np.ndarray]) -> np.ndarray:
    """k-th mixed central difference of ``fn`` along ``directions`` (k = len(directions))."""
    x = np.asarray(x, dtype=float)
    order = len(directions)
    norms = [np.linalg.norm(v) for v in directions]
    f0 = np.asarray(fn(x))
    if any(n == 0.0 for n in norms):
        return np.zeros_like(f0)
    units = [np.asarray(v, dtype=float) / n for v, n in zip(directions, norms)]
    h = float(fd_step(order) * (1.0 + np.linalg.norm(x)))
    acc = np.zeros_like(f0)
    for signs in itertools.product((1.0, -1.0), repeat=order):
        shift = sum(s * u for s, u in zip(signs, units))
        acc = acc + np.prod(signs) * np.asarray(fn(x + h * shift))
    return acc / (2.0 * h) ** order * np.prod(norms)


def _jax_tensor(fn: Callable, x: np.ndarray, order: int) -> np.ndarray:
    import jax

    jax.config.update("jax_enable_x64", True)
    g = fn
    for _ in range(order):
        g = jax.jacfwd(g)
    d = x.shape[-1]
    flat = x.reshape(-1, d)
    vals = jax.vmap(g)(flat)
    return np.asarray(vals).reshape(x.shape[:-1] + vals.shape[1:])


# -- evaluation with error checks ----------------------------------------------


def eval_drift(model: SdeModel, x) -> np.ndarray:
    """``b(x)``; raises ``ModelEvaluationError`` on non-finite input or output."""
    x = _check_point(model, x)
    out = np.asarray(model.drift(x), dtype=float)
    if out.shape != x.shape:
        raise ModelEvaluationError(f"drift returned shape {out.shape}, expected {x.shape}", x)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError("non-finite drift value", x)
    return out


def eval_diffusion(model: SdeModel, x) -> np.ndarray:
    """``sigma(x)`` as a ``d x m`` matrix."""
    x = _check_point(model, x)
    out = np.asarray(model.diffusion(x), dtype=float)
    expected = x.shape[:-1] + (model.d, model.m)
    if out.shape != expected:
        raise ModelEvaluationError(f"diffusion returned shape {out.shape}, expected {expected}", x)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError("non-finite diffusion value", x)
    return out


def _check_point(model: SdeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != model.d:
        raise ValueError(f"expected points of dimension {model.d}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ModelEvaluationError("non-finite evaluation point", x)
    return x


def deriv_apply(model: SdeModel, target, x, order: int, directions: Sequence) -> np.ndarray:
    """Contract the order-k derivative of ``b`` or of a diffusion column with k directions.

    ``target`` is ``"drift"`` or ``("diffusion", i)`` for column ``i``.
    In finite-difference mode the contraction is a mixed central
    difference along the directions themselves, not a full tensor.
    """
    if target == "drift":
        kind, col, max_order = "drift", None, MAX_DRIFT_ORDER
    elif isinstance(target, tuple) and len(target) == 2 and target[0] == "diffusion":
        kind, col, max_order = "diffusion", int(target[1]), MAX_DIFFUSION_ORDER
        if not 0 <= col < model.m:
            raise ValueError(f"diffusion column {col} out of range for m={model.m}")
    else:
        raise ValueError(f"unknown target {target!r}")
    if not 1 <= order <= max_order:
        raise ValueError(f"order {order} unsupported for {kind} (max {max_order})")
    if len(directions) != order:
        raise ValueError(f"need {order} directions, got {len(directions)}")
    x = _check_point(model, x)
    dirs = [np.asarray(v, dtype=float).reshape(model.d) for v in directions]

    has_analytic = order in (model.drift_derivs if kind == "drift" else model.diffusion_derivs)
    if model.deriv_mode == "finite-difference" or (model.deriv_mode == "analytic" and not has_analytic):
        if kind == "drift":
            fn = model.drift
        else:
            fn = lambda z: model.diffusion(z)[..., col]  # noqa: E731
        out = fd_directional(fn, x, dirs)
    else:
        tensor = model.derivative(kind, order, x)
        if kind == "diffusion":
            tensor = np.take(tensor, col, axis=-(order + 1))
        out = tensor
        for v in reversed(dirs):
            out = out @ v
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(f"non-finite order-{order} derivative", x)
    return out


# -- sampled assumption checks --------------------------------------------------


@dataclass
class AssumptionReport:
    """Smallest constants consistent with the sampled points, plus verdicts.

    Violations are the excess of the sampled quantity over the bound with a
    user-declared constant; they are ``<= 0`` when the declared constant holds.
    """

    constant_L: float
    constant_L1: float
    exponent_N: float
    constant_L3: float
    growth_C: float
    sample_count: int
    box: tuple
    max_violation: float
    violations: dict
    verdicts: dict


def _symmetric_eigs(jac: np.ndarray) -> np.ndarray:
    sym = 0.5 * (jac + np.swapaxes(jac, -1, -2))
    return np.linalg.eigvalsh(sym)


def estimate_growth_exponent(model: SdeModel, lower, upper) -> float:
    """Polynomial degree of the drift along rays far outside the box, to the nearest half-integer, at least 1."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    radius = 1e3 * (1.0 + float(np.max(np.maximum(np.abs(lower), np.abs(upper)))))
    rng = np.random.default_rng(12345)
    dirs = rng.standard_normal((256, model.d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    with np.errstate(all="ignore"):
        big = np.linalg.norm(model.drift(radius * dirs), axis=-1)
        half = np.linalg.norm(model.drift(0.5 * radius * dirs), axis=-1)
        ok = (half > 0) & (big > 0) & np.isfinite(big) & np.isfinite(half)
    if not np.any(ok):
        return 1.0
    degree = float(np.max(np.log2(big[ok] / half[ok])))
    return max(1.0, np.round(2.0 * degree) / 2.0)


def validate_assumptions(
    model: SdeModel,
    box: tuple,
    n_samples: int,
    rng_seed: int = 0,
    declared: Mapping[str, float] | None = None,
) -> AssumptionReport:
    """Estimate the monotonicity (M), growth (P) and Jacobian (J) constants on a box.

    ``box`` is ``(lower, upper)``, each a scalar or a length-d sequence.  Pairs
    are drawn uniformly from the box; the diagonal limit of the monotonicity
    quotient is covered by the largest eigenvalue of the symmetrised drift
    Jacobian at the sampled points.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    lower = np.broadcast_to(np.asarray(box[0], float), (model.d,))
    upper = np.broadcast_to(np.asarray(box[1], float), (model.d,))
    if np.any(upper <= lower):
        raise ValueError("sampling box is degenerate")
    declared = dict(declared or {})

    rng = np.random.default_rng(rng_seed)
    x1 = rng.uniform(lower, upper, size=(n_samples, model.d))
    x2 = rng.uniform(lower, upper, size=(n_samples, model.d))
    dx = x1 - x2
    db = model.drift(x1) - model.drift(x2)
    dist2 = np.sum(dx * dx, axis=-1)
    keep = dist2 > 0
    mono = np.sum(dx * db, axis=-1)[keep] / dist2[keep]

    pts = np.concatenate([x1, x2])
    eigs = _symmetric_eigs(model.drift_jacobian(pts))
    L = float(max(np.max(mono), np.max(eigs[..., -1])))
    L3 = float(max(0.0, -np.min(eigs[..., 0])))

    N = float(declared.get("N", model.growth_exponent or estimate_growth_exponent(model, lower, upper)))
    if N < 1:
        raise ValueError("growth exponent N must be >= 1")
    n1 = np.sum(x1 * x1, axis=-1)
    n2 = np.sum(x2 * x2, axis=-1)
    weight = (1.0 + n1 ** (N - 1) + n2 ** (N - 1)) * dist2
    lip = np.sum(db * db, axis=-1)[keep] / weight[keep]
    L1 = float(np.max(lip))

    bvals = model.drift(pts)
    growth_C = float(np.max(np.sum(bvals * bvals, axis=-1) / (1.0 + np.sum(pts * pts, axis=-1) ** N)))

    violations = {}
    if "L" in declared:
        violations["M"] = float(np.max(np.sum(dx * db, axis=-1) - declared["L"] * dist2))
        violations["M"] = max(violations["M"], float(np.max(eigs[..., -1]) - declared["L"]))
    if "L1" in declared:
        violations["P"] = float(np.max(np.sum(db * db, axis=-1) - declared["L1"] * weight))
    if "L3" in declared:
        violations["J"] = float(-np.min(eigs[..., 0]) - declared["L3"])

    estimates = {"M": L, "P": L1, "J": L3}
    verdicts = {}
    for key in ("M", "P", "J"):
        if key in violations:
            verdicts[key] = "pass" if violations[key] <= 0 else "fail"
        else:
            verdicts[key] = "pass" if np.isfinite(estimates[key]) else "fail"
    max_violation = max(violations.values()) if violations else float("-inf")
    return AssumptionReport(
        constant_L=L,
        constant_L1=L1,
        exponent_N=N,
        constant_L3=L3,
        growth_C=growth_C,
        sample_count=n_samples,
        box=(tuple(lower), tuple(upper)),
        max_violation=float(max_violation),
        violations=violations,
        verdicts=verdicts,
    )
