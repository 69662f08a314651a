"""Experiment runner behind the CLI, plus the refinement studies the verify suites use."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, validate_config
from .csvio import sha256_file, write_csv
from .ensemble import parallel_map, simulate_ensemble
from .hormander import hormander_rank
from .integrate import StatePath, fit_loglog, solve_sde
from .malliavin import gateaux_quotient_test, kde_density, moment_bound_report
from .model import SdeModel
from .paths import CameronMartinDirection, TimeGrid, cameron_martin_check, sample_brownian, sample_ensemble
from .variational import flow_matrices, malliavin_first, malliavin_second

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 1, 2, 3
EXACT_TOL = 1e-10


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str
    wall_time: float
    suites: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    exit_code: int = EXIT_OK
    details: dict = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    metrics: dict


# ---------------------------------------------------------------- studies


def flow_identity_study(model: SdeModel, x0, T: float, n_coarse: int, factor: int, n_paths: int, seed: int) -> dict:
    """Mean over paths of ``max_k ||K J - I||_F`` at ``n_coarse`` and ``factor * n_coarse`` steps,
    on common Brownian paths (the coarse increments are block sums of the fine ones)."""
    fine = sample_ensemble(TimeGrid(T, n_coarse * factor), model.m, seed, n_paths)
    out = {}
    for label, p in (("coarse", fine.coarsen(factor)), ("fine", fine)):
        sp = solve_sde(model, x0, p)
        out[label] = float(np.mean(flow_matrices(model, sp, p).max_identity_defect()))
    c, f = out["coarse"], out["fine"]
    out["ratio"] = c / f if f > 0 else float("inf") if c > 0 else 1.0
    out["slope"] = float(np.log(out["ratio"]) / np.log(factor)) if c > 0 and f > 0 else float("nan")
    return out


def representation_study(model: SdeModel, x0, T: float, resolutions, n_paths: int, seed: int) -> dict:
    """Mean over paths of the largest direct-vs-flow gap on the triangular grid, per resolution."""
    resolutions = sorted(resolutions)
    finest = resolutions[-1]
    base = sample_ensemble(TimeGrid(T, finest), model.m, seed, n_paths)
    gaps = []
    for n in resolutions:
        per = []
        for i in range(n_paths):
            p = base[i].coarsen(finest // n)
            sp = solve_sde(model, x0, p)
            a = malliavin_first(model, sp, p, "flow")
            b = malliavin_first(model, sp, p, "direct")
            per.append(np.max(np.abs(a.values - b.values)))
        gaps.append(float(np.mean(per)))
    dts = T / np.asarray(resolutions, dtype=float)
    slope = fit_loglog(dts, gaps)[0] if all(g > 0 for g in gaps) else float("nan")
    return {"resolutions": list(resolutions), "gaps": gaps, "slope": float(slope)}


# ---------------------------------------------------------------- suites


def _suite_gateaux(cfg: ExperimentConfig, model: SdeModel, x0) -> SuiteResult:
    grid = TimeGrid(cfg.T, cfg.steps)
    h = CameronMartinDirection.constant(grid, np.ones(model.m))
    rep = gateaux_quotient_test(model, x0, grid, h, cfg.epsilons, cfg.paths, cfg.seed, cfg.scheme)
    err = rep.mean_error
    exact = bool(np.all(err <= EXACT_TOL))
    eps = rep.epsilons
    need = 0.1 * eps[0] / eps[-1]
    ratio = float(err[0] / err[-1]) if err[-1] > 0 else float("inf")
    passed = rep.finite and (exact or (rep.strictly_decreasing and ratio >= need))
    metrics = {f"mean_error[{e:g}]": float(v) for e, v in zip(eps, err)}
    metrics.update({"ratio": ratio, "required_ratio": float(need), "slope": rep.slope, "excluded": rep.excluded})
    return SuiteResult("gateaux", bool(passed), metrics)


def _suite_cameron_martin(cfg: ExperimentConfig, model: SdeModel, x0) -> SuiteResult:
    grid = TimeGrid(cfg.T, cfg.steps)
    h = CameronMartinDirection.constant(grid, np.full(model.m, 0.5))
    functionals = {
        "one": lambda p: np.ones(p.batch_shape),
        "W1(T)": lambda p: p.values[..., -1, 0],
        "W1(T)^2": lambda p: p.values[..., -1, 0] ** 2,
        "X1(T)": lambda p: solve_sde(model, x0, p, cfg.scheme).states[..., -1, 0],
    }
    metrics, passed = {}, True
    for name, F in functionals.items():
        res = cameron_martin_check(F, h, cfg.paths, cfg.seed)
        metrics[f"{name}:lhs"] = res.lhs
        metrics[f"{name}:rhs"] = res.rhs
        metrics[f"{name}:ci"] = res.ci
        passed &= res.passed
    return SuiteResult("cameron_martin", bool(passed), metrics)


def _suite_flow_identity(cfg: ExperimentConfig, model: SdeModel, x0) -> SuiteResult:
    st = flow_identity_study(model, x0, cfg.T, cfg.steps, 4, cfg.paths, cfg.seed)
    exact = st["coarse"] <= EXACT_TOL and st["fine"] <= EXACT_TOL
    passed = exact or (np.isfinite(st["slope"]) and st["slope"] >= 0.4)
    return SuiteResult("flow_identity", bool(passed), st)


def _suite_moment(cfg: ExperimentConfig, model: SdeModel, x0) -> SuiteResult:
    states = simulate_ensemble(cfg.model, cfg.params, x0, TimeGrid(cfg.T, cfg.steps), cfg.paths, cfg.seed, cfg.scheme, cfg.workers)
    grid = TimeGrid(cfg.T, cfg.steps)
    rows = moment_bound_report(StatePath(grid, states), x0, cfg.p_list)
    metrics, passed = {}, True
    for r in rows:
        metrics[f"alpha_hat[p={r.p:g}]"] = r.alpha_hat
        metrics[f"alpha_fit[p={r.p:g}]"] = r.alpha_fit
        metrics[f"residual[p={r.p:g}]"] = r.residual
        metrics[f"sup_moment[p={r.p:g}]"] = r.sup_moment
        passed &= bool(np.isfinite(r.alpha_hat) and np.isfinite(r.sup_moment))
    return SuiteResult("moment", bool(passed), metrics)


SUITE_RUNNERS = {
    "gateaux": _suite_gateaux,
    "cameron_martin": _suite_cameron_martin,
    "flow_identity": _suite_flow_identity,
    "moment": _suite_moment,
}


# ---------------------------------------------------------------- commands


def _simulate(cfg, model, x0, out):
    grid = TimeGrid(cfg.T, cfg.steps)
    states = simulate_ensemble(cfg.model, cfg.params, x0, grid, cfg.paths, cfg.seed, cfg.scheme, cfg.workers)
    t = grid.nodes
    rows = ((i, t[k], *states[i, k]) for i in range(cfg.paths) for k in range(grid.n_steps + 1))
    write_csv(out, ["path_id", "t"] + [f"X{j + 1}" for j in range(model.d)], rows)
    return {}, EXIT_OK


def _malliavin_path(args):
    i, cfg_dict = args
    cfg = ExperimentConfig(**cfg_dict)
    model = cfg.build_model()
    x0 = cfg.initial_state(model)
    grid = TimeGrid(cfg.T, cfg.steps)
    path = sample_brownian(grid, model.m, i, cfg.seed)
    sp = solve_sde(model, x0, path, cfg.scheme)
    first = malliavin_first(model, sp, path, cfg.method)
    t = grid.nodes
    rows = []
    if cfg.order == 1:
        for k in range(grid.n_steps + 1):
            col = first.column(k)
            for s in range(k + 1):
                for a in range(model.d):
                    for j in range(model.m):
                        rows.append((i, t[s], t[k], a + 1, j + 1, col[s, a, j]))
        return rows
    second = malliavin_second(model, sp, path, first, cfg.coarsen)
    idx = second.indices
    for ci, tk in enumerate(idx):
        for ai, r in enumerate(idx):
            for bi, s in enumerate(idx):
                if tk < max(r, s):
                    continue
                block = second.values[ai, bi, ci]
                for a in range(model.d):
                    for j in range(model.m):
                        for kk in range(model.m):
                            rows.append((i, t[r], t[s], t[tk], a + 1, j + 1, kk + 1, block[a, j, kk]))
    return rows


def _malliavin(cfg, model, x0, out):
    chunks = parallel_map(_malliavin_path, [(i, cfg.to_dict()) for i in range(cfg.paths)], cfg.workers)
    if cfg.order == 1:
        header = ["path_id", "s", "t", "i", "j", "value"]
    else:
        header = ["path_id", "r", "s", "t", "i", "j", "k", "value"]
    write_csv(out, header, (row for rows in chunks for row in rows))
    return {"method": cfg.method, "order": cfg.order}, EXIT_OK


def _hormander(cfg, model, x0, out):
    x = np.asarray(cfg.x, dtype=float) if cfg.x is not None else x0
    v = hormander_rank(model, x, cfg.depth, cfg.tol)
    write_csv(out, ["depth", "rank"], [(k, int(r)) for k, r in enumerate(v.rank_by_depth)])
    details = {
        "satisfied": v.satisfied,
        "rank": v.rank,
        "depth_at_full_rank": v.depth_at_full_rank,
        "rank_by_depth": list(v.rank_by_depth),
        "basis_words": v.basis.words,
        "truncated": v.truncated,
        "fd_error_estimate": v.basis.fd_error,
        "inconclusive": not v.satisfied,
    }
    return details, EXIT_OK if v.satisfied else EXIT_FAIL


def _verify(cfg, model, x0, out):
    results = [SUITE_RUNNERS[name](cfg, model, x0) for name in cfg.suites]
    rows = []
    for r in results:
        rows.append((r.name, "passed", int(r.passed)))
        for key, val in r.metrics.items():
            rows.append((r.name, key, val if isinstance(val, (int, float)) else str(val)))
    write_csv(out, ["suite", "metric", "value"], rows)
    suites = {r.name: r.passed for r in results}
    return {"suites": suites}, EXIT_OK if all(suites.values()) else EXIT_FAIL


def _density(cfg, model, x0, out):
    grid = TimeGrid(cfg.T, cfg.steps)
    states = simulate_ensemble(cfg.model, cfg.params, x0, grid, cfg.paths, cfg.seed, cfg.scheme, cfg.workers)
    kde = kde_density(states[:, -1, cfg.component], cfg.bandwidth)
    write_csv(out, ["x", "density"], zip(kde.x, kde.density))
    return {"bandwidth": kde.bandwidth, "max_second_derivative": kde.max_second_derivative, "peak": kde.peak}, EXIT_OK


COMMAND_RUNNERS = {
    "simulate": _simulate,
    "malliavin": _malliavin,
    "hormander": _hormander,
    "verify": _verify,
    "density": _density,
}


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Validate, run, write the CSV and ``<out>.manifest.json``.

    Divergence propagates as an exception; the CLI maps it to its exit code.
    """
    validate_config(cfg)
    start = time.perf_counter()
    model = cfg.build_model()
    x0 = cfg.initial_state(model)
    out = Path(cfg.out or f"{cfg.command}.csv")
    details, code = COMMAND_RUNNERS[cfg.command](cfg, model, x0, out)
    suites = details.pop("suites", {}) if cfg.command == "verify" else {}
    manifest = RunManifest(
        command=cfg.command,
        config_hash=cfg.digest(),
        seed=cfg.seed,
        version=__version__,
        wall_time=time.perf_counter() - start,
        suites=suites,
        outputs=[{"path": str(out), "sha256": sha256_file(out)}],
        exit_code=code,
        details=details,
    )
    manifest.write(manifest_path(out))
    return manifest


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")
