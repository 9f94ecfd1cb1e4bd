"""Homotopy primal-dual interior-point solver for the perturbed KKT system.

The complementarity products are relaxed to s (.) gamma = rho 1 and rho is
driven to zero on a geometric schedule.  Each rho level runs damped Newton
with pseudoinverse steps; the merit function is the plain residual norm
||K_rho(y)||_2 and backtracking keeps all slack and inequality-multiplier
components strictly positive.  When a rho level hits a line-search failure
the schedule continues from the best iterate so far and the report flags
the failed block.

Identical inputs and options produce identical reports (modulo wall time).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kkt, linalg
from .kkt import Candidate, KktSystem
from .model import LexGame


@dataclass(frozen=True)
class SolverOptions:
    rho0: float = 1.0
    sigma: float = 0.1              # contraction rate of the rho schedule
    beta: float = 0.5               # backtracking factor
    eps: float = 1e-8               # inner tolerance on ||K_rho||_2
    schedule_len: int = 11          # rho in {1, 1e-1, ..., 1e-10} by default
    max_inner: int = 200
    rank_tol: float | None = None   # pseudoinverse cutoff, None = default
    slack_floor: float = 1e-2       # positivity floor at initialization
    schedule: tuple | None = None   # explicit rho values, overrides the above

    def rho_values(self):
        if self.schedule is not None:
            return tuple(float(r) for r in self.schedule)
        return tuple(self.rho0 * self.sigma**j for j in range(self.schedule_len))


@dataclass
class RhoBlock:
    rho: float
    residuals: list            # ||K_rho||_2 at entry and after each accepted step
    alphas: list
    min_s_gamma: list
    converged: bool
    line_search_failed: bool
    final_vector: np.ndarray


@dataclass
class SolveReport:
    status: str                # converged | line-search-failure | max-iterations | numeric-failure
    final: Candidate
    blocks: list
    wall_time: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def z(self) -> np.ndarray:
        return self.final.z

    def trace_rows(self):
        rows = []
        for blk in self.blocks:
            for t in range(len(blk.residuals)):
                alpha = blk.alphas[t - 1] if t > 0 else ""
                rows.append((blk.rho, t, blk.residuals[t], alpha, blk.min_s_gamma[t]))
        return rows

    def write_trace(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            f.write("rho,inner_iter,residual,alpha,min_s_gamma\n")
            for rho, t, res, alpha, msg in self.trace_rows():
                f.write(f"{rho:.16g},{t},{res:.16g},{alpha},{msg:.16g}\n")


@dataclass
class CentralPathSample:
    rho: float
    converged: bool
    iterate: np.ndarray | None
    distance: float | None


@dataclass
class CentralPathResult:
    samples: list
    slope: float
    reference_rho: float


class SolverError(Exception):
    pass


def initialize(game: LexGame, z0, opts: SolverOptions = SolverOptions(),
               system: KktSystem | None = None) -> Candidate:
    """Initial iterate: s_k = max(g(z0), floor) elementwise, gamma_k =
    rho0 / s_k (so s (.) gamma = rho0 1 at the start), all other duals 0."""
    psys = system or kkt.assemble_perturbed_parametric(game)
    y = kkt.zero_candidate(psys.layout)
    z0 = np.asarray(z0, dtype=float)
    zidx = psys.layout.role_indices("z")
    if z0.shape != zidx.shape:
        raise ValueError(f"z0 has length {z0.shape}, expected {zidx.shape}")
    y.vector[zidx] = z0
    point = psys.space.point_from_vector(psys._full_x(y))
    from .expr import evaluate
    for pd in psys.structure.players:
        if pd.m_ineq == 0:
            continue
        gvals = np.array([evaluate(e, point) for e in pd.g_exprs])
        if not np.all(np.isfinite(gvals)):
            raise linalg.NumericError("g(z0) is not finite")
        s = np.maximum(gvals, opts.slack_floor)
        for k in range(1, pd.K + 1):
            y.set_block(pd.index, k, "s", s)
            y.set_block(pd.index, k, "gam", opts.rho0 / s)
    return y


def initialize_complete(game: LexGame, z0, opts: SolverOptions = SolverOptions(),
                        system: KktSystem | None = None) -> Candidate:
    """Heuristic start for the complete-system homotopy: gamma blocks carry
    rho/s on the g rows and sqrt(rho) on the dual-nonnegativity rows; each
    slack matches its paired inequality value, clamped at the floor."""
    psys = system or kkt.assemble_complete_perturbed(game)
    y = kkt.zero_candidate(psys.layout)
    z0 = np.asarray(z0, dtype=float)
    zidx = psys.layout.role_indices("z")
    y.vector[zidx] = z0
    point = psys.space.point_from_vector(psys._full_x(y))
    from .expr import evaluate
    root = math.sqrt(opts.rho0)
    for pd in psys.structure.players:
        m_i = pd.m_ineq
        if m_i == 0:
            continue
        gvals = np.array([evaluate(e, point) for e in pd.g_exprs])
        s_g = np.maximum(gvals, opts.slack_floor)
        for k in range(1, pd.K + 1):
            gam = np.full(len(pd.blocks[(k, "gam")]), root)
            gam[:m_i] = opts.rho0 / s_g
            y.set_block(pd.index, k, "gam", gam)
    # slacks equal their paired inequality entry, clamped positive
    x = psys._full_x(y)
    s_idx, dual_idx = psys.slack_pairs
    full = psys.space.point_from_vector(x)
    t = 0
    for pd in psys.structure.players:
        for k in range(1, pd.K + 1):
            for a, _ in pd.comp_pairs[k]:
                val = evaluate(a, full)
                y.vector[s_idx[t]] = max(val, opts.slack_floor)
                t += 1
    return y


def newton_step(system: KktSystem, y, opts: SolverOptions = SolverOptions()) -> np.ndarray:
    """Pseudoinverse Newton direction -(grad K_rho)+ K_rho at y."""
    J = system.jacobian(y)
    F = system.residual(y)
    try:
        return linalg.pinv_solve(J, -F, opts.rank_tol)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - rare LAPACK failure
        raise SolverError(f"SVD failure in Newton step: {exc}") from exc


def line_search(system: KktSystem, y, dy, opts: SolverOptions = SolverOptions()):
    """Backtracking: largest alpha in {1, beta, beta^2, ...} whose step does
    not increase ||K_rho||_2 and keeps (s, gamma) strictly positive.
    Returns (alpha, accepted vector, new merit) or None on failure."""
    y = y.vector if isinstance(y, Candidate) else np.asarray(y, dtype=float)
    dy = np.asarray(dy, dtype=float)
    merit0 = float(np.linalg.norm(system.residual(y)))
    pos = system.positivity
    alpha = 1.0
    while True:
        y_new = y + alpha * dy
        if not (pos.size and np.min(y_new[pos]) <= 0.0):
            merit_new = float(np.linalg.norm(system.residual(y_new)))
            if merit_new <= merit0 and math.isfinite(merit_new):
                return alpha, y_new, merit_new
        alpha *= opts.beta
        if alpha < opts.eps:
            return None


def _min_s_gamma(system: KktSystem, y: np.ndarray) -> float:
    s_idx, d_idx = system.slack_pairs
    if s_idx.size == 0:
        return float("nan")
    return float(np.min(y[s_idx] * y[d_idx]))


def solve_system(psys: KktSystem, y0: Candidate,
                 opts: SolverOptions = SolverOptions()) -> SolveReport:
    """Run the homotopy loop on an already-assembled perturbed system."""
    t_start = time.perf_counter()
    y = np.asarray(y0.vector, dtype=float).copy()
    blocks = []
    failure = None
    for rho in opts.rho_values():
        sys_rho = psys.with_rho(rho)
        residuals = [float(np.linalg.norm(sys_rho.residual(y)))]
        alphas, ms = [], [_min_s_gamma(sys_rho, y)]
        ls_failed = False
        inner = 0
        try:
            while residuals[-1] > opts.eps and inner < opts.max_inner:
                dy = newton_step(sys_rho, y, opts)
                hit = line_search(sys_rho, y, dy, opts)
                if hit is None:
                    ls_failed = True
                    failure = failure or "line-search-failure"
                    break
                alpha, y, merit = hit
                residuals.append(merit)
                alphas.append(alpha)
                ms.append(_min_s_gamma(sys_rho, y))
                inner += 1
        except SolverError:
            failure = "numeric-failure"
            ls_failed = True
        converged = residuals[-1] <= opts.eps
        if not converged and not ls_failed and inner >= opts.max_inner:
            failure = failure or "max-iterations"
        blocks.append(RhoBlock(
            rho=rho, residuals=residuals, alphas=alphas, min_s_gamma=ms,
            converged=converged, line_search_failed=ls_failed,
            final_vector=y.copy(),
        ))
    wall = time.perf_counter() - t_start
    final = Candidate(psys.layout, y)
    status = "converged" if blocks and blocks[-1].converged else (failure or "max-iterations")
    report = SolveReport(status=status, final=final, blocks=blocks, wall_time=wall)
    report.diagnostics = _final_diagnostics(psys, blocks, y)
    return report


def _final_diagnostics(psys: KktSystem, blocks, y: np.ndarray) -> dict:
    last = blocks[-1]
    sys_rho = psys.with_rho(last.rho)
    F = sys_rho.residual(y)
    by_kind: dict = {}
    for val, tag in zip(F, sys_rho.rows_meta):
        by_kind.setdefault(tag.kind, []).append(abs(float(val)))
    diag = {
        "final_rho": last.rho,
        "final_residual": last.residuals[-1],
        "stationarity_inf": max(by_kind.get("stat", [0.0])),
        "equality_inf": max(by_kind.get("eq", [0.0])),
        "perturbed_comp_inf": max(by_kind.get("comp_slack", [0.0])),
        "min_s_gamma": _min_s_gamma(sys_rho, y),
        "failed_blocks": [b.rho for b in blocks if not b.converged],
    }
    gam_idx = psys.layout.role_indices("gam")
    diag["min_gamma"] = float(np.min(y[gam_idx])) if gam_idx.size else float("nan")
    # g(z) = slack-definition residual + s, so feasibility comes for free
    s_idx = psys.layout.role_indices("s")
    if s_idx.size:
        g_vals = []
        t = 0
        for val, tag in zip(F, sys_rho.rows_meta):
            if tag.kind == "slack_def":
                g_vals.append(float(val) + y[s_idx[t]])
                t += 1
        diag["min_inequality"] = min(g_vals) if g_vals else float("nan")
    return diag


def solve(game: LexGame, z0, opts: SolverOptions = SolverOptions()) -> SolveReport:
    """Assemble the perturbed reduced system for the game and run the
    homotopy from the standard initialization at z0."""
    psys = kkt.assemble_perturbed_parametric(game)
    rho_first = opts.rho_values()[0]
    init_opts = opts if rho_first == opts.rho0 else \
        SolverOptions(**{**opts.__dict__, "rho0": rho_first})
    y0 = initialize(game, z0, init_opts, system=psys)
    return solve_system(psys, y0, opts)


# ----------------------------------------------------------------------
# convergence-rate diagnostics

@dataclass
class TailFit:
    coefficient: float
    verdict: str            # quadratic | not-quadratic | inconclusive
    errors: list
    tail: list


def quadratic_tail_fit(data, threshold: float = 1e-1, max_tail: int = 8,
                       tol_decades: float = 0.5) -> TailFit:
    """Fit r_{t+1} ~ c r_t^2 over the final residuals below threshold.

    Verdict is quadratic when the one-parameter fit predicts every tail
    step within tol_decades decades; fewer than three tail points is
    inconclusive.
    """
    if isinstance(data, SolveReport):
        block = None
        for blk in reversed(data.blocks):
            if len(blk.residuals) >= 3:
                block = blk
                break
        residuals = list(block.residuals) if block else []
    else:
        residuals = [float(r) for r in data]
    tail = []
    for r in reversed(residuals):
        if 0.0 < r < threshold:
            tail.append(r)
        else:
            break
    tail.reverse()
    tail = tail[-max_tail:]
    if len(tail) < 3:
        return TailFit(float("nan"), "inconclusive", [], tail)
    x = np.log10(np.array(tail[:-1]))
    ynext = np.log10(np.array(tail[1:]))
    logc = float(np.mean(ynext - 2.0 * x))
    errors = np.abs(ynext - (2.0 * x + logc))
    verdict = "quadratic" if float(np.max(errors)) <= tol_decades else "not-quadratic"
    return TailFit(10.0**logc, verdict, errors.tolist(), tail)


def central_path_study(game: LexGame, z0, rhos, opts: SolverOptions = SolverOptions(),
                       system: KktSystem | None = None) -> CentralPathResult:
    """Distances of converged iterates to the smallest-rho reference and the
    log-log regression slope over the decades where the distance exceeds
    ten times the solver tolerance."""
    rhos = sorted((float(r) for r in rhos), reverse=True)
    run_opts = SolverOptions(**{**opts.__dict__, "schedule": tuple(rhos),
                                "rho0": rhos[0]})
    psys = system or kkt.assemble_perturbed_parametric(game)
    y0 = initialize(game, z0, run_opts, system=psys)
    report = solve_system(psys, y0, run_opts)

    converged = [(b.rho, b.final_vector) for b in report.blocks if b.converged]
    if not converged:
        return CentralPathResult(
            [CentralPathSample(b.rho, False, None, None) for b in report.blocks],
            float("nan"), float("nan"),
        )
    ref_rho, y_ref = converged[-1]
    samples = []
    for blk in report.blocks:
        if not blk.converged:
            samples.append(CentralPathSample(blk.rho, False, None, None))
            continue
        dist = float(np.linalg.norm(blk.final_vector - y_ref))
        samples.append(CentralPathSample(blk.rho, True, blk.final_vector, dist))
    pts = [(s.rho, s.distance) for s in samples
           if s.converged and s.rho != ref_rho and s.distance > 10 * run_opts.eps]
    if len(pts) >= 2:
        lx = np.log10([p[0] for p in pts])
        ly = np.log10([p[1] for p in pts])
        slope = float(np.polyfit(lx, ly, 1)[0])
    else:
        slope = float("nan")
    return CentralPathResult(samples, slope, ref_rho)
