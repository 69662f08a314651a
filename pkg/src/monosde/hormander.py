"""Lie brackets of vector fields and the bracket-span rank test.

Fields are evaluated at single points.  Each field knows its value, its
Jacobian action ``dV(x) w`` and, when cheaply available, its second
directional derivative ``d^2V(x)[w, v]``.  Whatever is missing is obtained by
central differences of the next lower level, and the nesting depth of such
differences is tracked so the rank test can widen its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import PreconditionError
from .model import EPS, SdeModel

DEFAULT_MAX_DEPTH = 6
WORD_CAP = 10_000
DEDUP_RTOL = 1e-9


def fd_noise(level: int) -> float:
    """Relative error after ``level`` nested central differences, each with step ``noise^(1/3)``."""
    noise = EPS
    for _ in range(level):
        noise = noise ** (2.0 / 3.0)
    return noise


@dataclass(frozen=True)
class VectorFieldExpr:
    d: int
    value: Callable[[np.ndarray], np.ndarray]
    jvp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hvp: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None
    word: str = "V"
    levels: tuple = (0, 0, 0)  # nested-FD depth of (value, jvp, hvp)

    def __call__(self, x) -> np.ndarray:
        return self.value(np.asarray(x, dtype=float))

    @property
    def fd_level(self) -> int:
        return self.levels[0]

    def second(self, x: np.ndarray, w: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``d^2 V(x)[w, v]``, by differencing ``jvp`` when no closed form is attached."""
        if self.hvp is not None:
            return self.hvp(x, w, v)
        h = fd_noise(self.levels[1]) ** (1.0 / 3.0) * (1.0 + np.linalg.norm(x))
        return (self.jvp(x + h * v, w) - self.jvp(x - h * v, w)) / (2.0 * h)

    @property
    def second_level(self) -> int:
        return self.levels[2] if self.hvp is not None else self.levels[1] + 1

    @classmethod
    def affine(cls, A, c=None, word: str = "V") -> "VectorFieldExpr":
        """``x -> A x + c``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        c = np.zeros(A.shape[0]) if c is None else np.asarray(c, dtype=float)
        zero = np.zeros(A.shape[0])
        return cls(A.shape[0], lambda x: A @ x + c, lambda x, w: A @ w, lambda x, w, v: zero, word)


def diffusion_field(model: SdeModel, i: int) -> VectorFieldExpr:
    """Column ``i`` of the diffusion (0-based; the word uses 1-based ``sigma^i``)."""
    if not 0 <= i < model.m:
        raise IndexError(f"diffusion column {i} out of range for m={model.m}")
    return VectorFieldExpr(
        model.d,
        lambda x: model.diffusion(x)[:, i],
        lambda x, w: model.diffusion_jacobian(x)[:, i, :] @ w,
        lambda x, w, v: np.einsum("abc,b,c->a", model.diffusion_hessian(x)[:, i], w, v),
        f"s{i + 1}",
    )


def drift_field(model: SdeModel) -> VectorFieldExpr:
    return VectorFieldExpr(
        model.d,
        model.drift,
        lambda x, w: model.drift_jacobian(x) @ w,
        lambda x, w, v: np.einsum("abc,b,c->a", model.drift_hessian(x), w, v),
        "b",
    )


def stratonovich_drift(model: SdeModel) -> VectorFieldExpr:
    """``b - 1/2 sum_i d sigma^i . sigma^i``.  Its own second derivative is left to differencing."""

    def value(x):
        sig = model.diffusion(x)
        dsig = model.diffusion_jacobian(x)  # (d, m, d)
        return model.drift(x) - 0.5 * np.einsum("aib,bi->a", dsig, sig)

    def jvp(x, w):
        sig = model.diffusion(x)
        dsig = model.diffusion_jacobian(x)
        d2sig = model.diffusion_hessian(x)  # (d, m, d, d)
        corr = np.einsum("aibc,bi,c->a", d2sig, sig, w) + np.einsum("aib,bi->a", dsig, np.einsum("bic,c->bi", dsig, w))
        return model.drift_jacobian(x) @ w - 0.5 * corr

    return VectorFieldExpr(model.d, value, jvp, None, "s0", (0, 0, 1))


def lie_bracket(V: VectorFieldExpr, U: VectorFieldExpr, allow_fd: bool = True) -> VectorFieldExpr:
    """``[V, U](x) = dU(x) V(x) - dV(x) U(x)``."""
    if V.d != U.d:
        raise ValueError(f"dimension mismatch: {V.d} vs {U.d}")
    if not allow_fd and (V.hvp is None or U.hvp is None):
        raise PreconditionError(f"bracket [{V.word},{U.word}] needs second derivatives that are only available by differencing")

    def value(x):
        return U.jvp(x, V.value(x)) - V.jvp(x, U.value(x))

    def jvp(x, w):
        Vx, Ux = V.value(x), U.value(x)
        return U.second(x, Vx, w) + U.jvp(x, V.jvp(x, w)) - V.second(x, Ux, w) - V.jvp(x, U.jvp(x, w))

    vl = max(V.levels[1], U.levels[1], V.levels[0], U.levels[0])
    jl = max(vl, V.second_level, U.second_level)
    return VectorFieldExpr(V.d, value, jvp, None, f"[{V.word},{U.word}]", (vl, jl, jl + 1))


@dataclass
class BracketBasis:
    x: np.ndarray
    depth: int
    words: list
    vectors: list
    rank: int
    singular_values: np.ndarray
    rank_by_depth: list
    truncated: bool = False
    fd_error: float = 0.0
    all_words: int = 0

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.vectors).reshape(len(self.vectors), self.x.size)


def _numerical_rank(vectors: list, tol: float) -> tuple[int, np.ndarray]:
    if not vectors:
        return 0, np.zeros(0)
    sv = np.linalg.svd(np.array(vectors), compute_uv=False)
    if sv[0] == 0:
        return 0, sv
    return int(np.sum(sv > tol * sv[0])), sv


def _orthogonal_part(vec: np.ndarray, basis: list) -> float:
    if not basis:
        return float(np.linalg.norm(vec))
    q, _ = np.linalg.qr(np.array(basis).T)
    return float(np.linalg.norm(vec - q @ (q.T @ vec)))


def bracket_generate(
    model: SdeModel,
    x,
    max_depth: int = DEFAULT_MAX_DEPTH,
    dedup_tol: float = DEDUP_RTOL,
    word_cap: int = WORD_CAP,
    stop_at_full_rank: bool = True,
) -> BracketBasis:
    """Evaluate ``Sigma_0, Sigma_1, ...`` at ``x`` up to ``max_depth``.

    ``Sigma_0`` holds the diffusion columns and ``Sigma_k`` the brackets
    ``[sigma^j, V]`` for ``j = 0..m`` and ``V`` in ``Sigma_{k-1}``, with
    ``sigma^0`` the Stratonovich drift.  Every word is generated; only the
    retained basis is pruned, dropping vectors whose component orthogonal to
    the current span is below ``dedup_tol`` times the largest singular value.
    """
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != model.d:
        raise ValueError(f"x has dimension {x.size}, model expects {model.d}")
    sigmas = [diffusion_field(model, i) for i in range(model.m)]
    gens = [stratonovich_drift(model)] + sigmas
    layer = list(sigmas)
    basis_words, basis_vecs = [], []
    ranks = []
    truncated = False
    max_level = 0
    sv = np.zeros(0)
    total = 0
    depth = 0
    for depth in range(max_depth + 1):
        if depth > 0:
            nxt = []
            for V in layer:
                for j, S in enumerate(gens):
                    if S.word == V.word:
                        continue  # [V, V] = 0
                    if total + len(nxt) >= word_cap:
                        truncated = True
                        break
                    nxt.append(lie_bracket(S, V))
                if truncated:
                    break
            layer = nxt
        total += len(layer)
        for F in layer:
            vec = F(x)
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"non-finite bracket {F.word} at x")
            max_level = max(max_level, F.fd_level)
            scale = sv[0] if sv.size else 0.0
            scale = max(scale, float(np.linalg.norm(vec)))
            tol = max(dedup_tol, fd_noise(F.fd_level) if F.fd_level else 0.0)
            if scale > 0 and _orthogonal_part(vec, basis_vecs) > tol * scale:
                basis_words.append(F.word)
                basis_vecs.append(vec)
                sv = np.linalg.svd(np.array(basis_vecs), compute_uv=False)
        rtol = max(dedup_tol, fd_noise(max_level) if max_level else 0.0)
        r, sv_full = _numerical_rank(basis_vecs, rtol)
        ranks.append(r)
        if truncated or (stop_at_full_rank and r == model.d):
            break
    r, sv_full = _numerical_rank(basis_vecs, max(dedup_tol, fd_noise(max_level) if max_level else 0.0))
    return BracketBasis(
        x, depth, basis_words, basis_vecs, r, sv_full, ranks, truncated,
        fd_noise(max_level) if max_level else 0.0, total,
    )


@dataclass(frozen=True)
class HormanderVerdict:
    satisfied: bool
    rank: int
    depth_at_full_rank: int | None
    rank_by_depth: tuple
    truncated: bool
    basis: BracketBasis = field(repr=False)

    @property
    def inconclusive(self) -> bool:
        """A negative verdict at the depth cap says nothing about deeper brackets."""
        return not self.satisfied


def hormander_rank(
    model: SdeModel,
    x,
    max_depth: int = DEFAULT_MAX_DEPTH,
    tol: float = DEDUP_RTOL,
    word_cap: int = WORD_CAP,
) -> HormanderVerdict:
    """Does the bracket span reach full rank by ``max_depth``?  Singular values above
    ``tol`` times the largest count toward the rank."""
    basis = bracket_generate(model, x, max_depth, tol, word_cap)
    full = [k for k, r in enumerate(basis.rank_by_depth) if r == model.d]
    depth = full[0] if full else None
    return HormanderVerdict(bool(full), basis.rank, depth, tuple(basis.rank_by_depth), basis.truncated, basis)
