"""Recursive assembly of the reduced and complete KKT systems.

The reduced system imposes stationarity only with respect to each player's
own primal block at every level; its size grows polynomially in the level
count.  The complete system re-imposes stationarity with respect to the
induced primals (lower-level duals) and inherits all lower complementarity
rows, which makes it grow exponentially.

Every residual row is built symbolically, and the Jacobian is obtained by
differentiating each row once at assembly time.  Evaluation is hybrid: rows
of polynomial degree <= 2 are lowered to an exact constant/linear/bilinear
form (their Taylor expansion), everything else runs on a compiled tape.
Assembled systems are immutable; residual and Jacobian evaluation is pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr, linalg
from .expr import Expression, Tape, VariableSpace, differentiate
from .model import LexGame, validate


class AssemblyError(Exception):
    pass


class CompleteSystemTooLarge(AssemblyError):
    """The complete system would exceed the configured dimension cap."""


DEFAULT_DIMENSION_CAP = 100_000

ROLES = ("z", "psi", "phi", "lam", "gam", "s")


# ----------------------------------------------------------------------
# layout and candidates

@dataclass(frozen=True)
class Segment:
    player: int
    level: int
    role: str
    offset: int
    length: int


class VariableLayout:
    """Ordered tagged segments partitioning the flat iterate vector."""

    def __init__(self, segments: Sequence[Segment]):
        self.segments = tuple(segments)
        self.total = sum(s.length for s in self.segments)
        self._index = {(s.player, s.level, s.role): s for s in self.segments}

    def slice_of(self, player: int, level: int, role: str) -> slice:
        seg = self._index.get((player, level, role))
        if seg is None:
            return slice(0, 0)
        return slice(seg.offset, seg.offset + seg.length)

    def has(self, player: int, level: int, role: str) -> bool:
        return (player, level, role) in self._index

    def role_indices(self, *roles: str) -> np.ndarray:
        idx = []
        for s in self.segments:
            if s.role in roles:
                idx.extend(range(s.offset, s.offset + s.length))
        return np.array(idx, dtype=int)

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "segments": [
                {"player": s.player, "level": s.level, "role": s.role,
                 "offset": s.offset, "length": s.length}
                for s in self.segments
            ],
        }

    def dump(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=1)


@dataclass
class Candidate:
    """Flat iterate plus the layout that gives its entries meaning."""

    layout: VariableLayout
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        if self.vector.shape != (self.layout.total,):
            raise ValueError(
                f"candidate vector has length {self.vector.shape}, "
                f"layout expects {self.layout.total}"
            )

    @property
    def z(self) -> np.ndarray:
        idx = self.layout.role_indices("z")
        return self.vector[idx]

    def block(self, player: int, level: int, role: str) -> np.ndarray:
        return self.vector[self.layout.slice_of(player, level, role)]

    def set_block(self, player: int, level: int, role: str, values):
        self.vector[self.layout.slice_of(player, level, role)] = values

    def copy(self) -> "Candidate":
        return Candidate(self.layout, self.vector.copy())


def zero_candidate(layout: VariableLayout) -> Candidate:
    return Candidate(layout, np.zeros(layout.total))


def map_candidate(cand: Candidate, target: VariableLayout) -> Candidate:
    """Copy matching (player, level, role) segments, zero-fill the rest."""
    out = zero_candidate(target)
    for seg in target.segments:
        src = cand.layout.slice_of(seg.player, seg.level, seg.role)
        if src.stop - src.start == seg.length:
            out.vector[seg.offset:seg.offset + seg.length] = cand.vector[src]
    return out


@dataclass(frozen=True)
class RowTag:
    player: int
    level: int
    kind: str  # stat | stat_ind | eq | comp | comp_dual | slack_def | comp_slack


# ----------------------------------------------------------------------
# size counters

def count_reduced(n: int, m_e: int, m_i: int, K: int):
    """(variables, F rows, G rows) of one player's reduced KKT system."""
    if K < 1 or min(n, m_e, m_i) < 0:
        raise ValueError("need K >= 1 and nonnegative dimensions")
    variables = (1 + K * (K - 1) // 2) * n + K * m_e + (K * (K + 1) // 2) * m_i
    f_rows = K * n + m_e + K * m_i
    g_rows = (K + 1) * m_i
    return variables, f_rows, g_rows


def count_complete(n: int, m_e: int, m_i: int, K: int):
    """(variables, F rows, G rows) of one player's complete KKT system."""
    if K < 1 or min(n, m_e, m_i) < 0:
        raise ValueError("need K >= 1 and nonnegative dimensions")
    v = 2 ** (K - 1) * (n + m_e + K * m_i)
    return v, v, (2 ** K) * m_i


# ----------------------------------------------------------------------
# hybrid row evaluation

class _RowProgram:
    """Residual rows plus their analytic Jacobian over a variable space.

    Rows with polynomial degree <= 2 are stored exactly as
    c + B x + 1/2 x'Hx (H sparse, enumerated as ordered index pairs);
    the rest are evaluated on a shared tape, as are their Jacobian
    entries.  Only the first n_wrt flat variables contribute Jacobian
    columns (trailing parameters such as the homotopy level do not).
    """

    def __init__(self, rows, space: VariableSpace, n_wrt: int):
        self.rows = list(rows)
        self.space = space
        self.n_wrt = n_wrt
        m = len(self.rows)
        n_all = space.size

        zero_evals = []  # exprs whose value at 0 we need

        def defer(e):
            zero_evals.append(e)
            return len(zero_evals) - 1

        lin_r, lin_c, lin_slot = [], [], []
        quad_r, quad_a, quad_b, quad_slot = [], [], [], []
        const_slot = np.full(m, -1, dtype=int)
        tape_rows = []
        tape_jac = []  # (row, col, expr)

        for r, row in enumerate(self.rows):
            deg = expr.polynomial_degree(row)
            if deg is not None and deg <= 2:
                const_slot[r] = defer(row)
                for v in sorted(row.support, key=space.flat_index):
                    a = space.flat_index(v)
                    de = differentiate(row, v)
                    lin_r.append(r)
                    lin_c.append(a)
                    lin_slot.append(defer(de))
                    for u in sorted(de.support, key=space.flat_index):
                        b = space.flat_index(u)
                        dde = differentiate(de, u)
                        quad_r.append(r)
                        quad_a.append(a)
                        quad_b.append(b)
                        quad_slot.append(defer(dde))
            else:
                tape_rows.append(r)
                for v in sorted(row.support, key=space.flat_index):
                    a = space.flat_index(v)
                    if a < n_wrt:
                        tape_jac.append((r, a, differentiate(row, v)))

        zvals = (Tape(zero_evals, space).evaluate(np.zeros(n_all))
                 if zero_evals else np.zeros(0))

        self._c = np.zeros(m)
        mask = const_slot >= 0
        self._c[mask] = zvals[const_slot[mask]]
        self._B = np.zeros((m, n_all))
        self._B[lin_r, lin_c] = zvals[lin_slot]
        self._quad_r = np.array(quad_r, dtype=int)
        self._quad_a = np.array(quad_a, dtype=int)
        self._quad_b = np.array(quad_b, dtype=int)
        self._quad_w = zvals[quad_slot] if quad_slot else np.zeros(0)

        self._tape_rows = np.array(tape_rows, dtype=int)
        self._tape = Tape([self.rows[r] for r in tape_rows], space) if tape_rows else None
        self._jac_tape = Tape([e for _, _, e in tape_jac], space) if tape_jac else None
        self._jac_rc = (np.array([t[0] for t in tape_jac], dtype=int),
                        np.array([t[1] for t in tape_jac], dtype=int))

        keep = self._quad_a < n_wrt
        self._jquad_flat = self._quad_r[keep] * n_wrt + self._quad_a[keep]
        self._jquad_b = self._quad_b[keep]
        self._jquad_w = self._quad_w[keep]

    def residual(self, x: np.ndarray) -> np.ndarray:
        out = self._B @ x + self._c
        if self._quad_w.size:
            out += 0.5 * np.bincount(
                self._quad_r,
                weights=self._quad_w * x[self._quad_a] * x[self._quad_b],
                minlength=len(self.rows),
            )
        if self._tape is not None:
            out[self._tape_rows] = self._tape.evaluate(x)
        return out

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        J = self._B[:, : self.n_wrt].copy()
        if self._jquad_w.size:
            J.ravel()[:] += np.bincount(
                self._jquad_flat,
                weights=self._jquad_w * x[self._jquad_b],
                minlength=J.size,
            )
        if self._jac_tape is not None:
            rr, cc = self._jac_rc
            J[rr, cc] = self._jac_tape.evaluate(x)
        return J


# ----------------------------------------------------------------------
# assembled systems

@dataclass(eq=False)
class KktSystem:
    """Residual map F (= 0), inequality map G (>= 0), analytic Jacobian
    of F, and the variable layout.  kind is one of reduced, complete,
    perturbed-reduced, perturbed-complete."""

    kind: str
    layout: VariableLayout
    space: VariableSpace
    F_exprs: list
    G_exprs: list
    rows_meta: list
    structure: object = None
    rho: float | None = None
    positivity: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    slack_pairs: np.ndarray = field(default_factory=lambda: np.zeros((2, 0), dtype=int))
    _program: _RowProgram | None = None
    _g_tape: Tape | None = None

    def __post_init__(self):
        if self._program is None and self.F_exprs:
            self._program = _RowProgram(self.F_exprs, self.space, self.layout.total)
        if self._g_tape is None and self.G_exprs:
            self._g_tape = Tape(self.G_exprs, self.space)

    # -- evaluation ----------------------------------------------------
    def _full_x(self, y) -> np.ndarray:
        y = y.vector if isinstance(y, Candidate) else np.asarray(y, dtype=float)
        if y.shape != (self.layout.total,):
            raise ValueError(
                f"iterate has length {y.shape}, layout expects {self.layout.total}"
            )
        if self.space.size == self.layout.total:
            return y
        extra = np.zeros(self.space.size - self.layout.total)
        if self.rho is not None:
            extra[-1] = self.rho
        return np.concatenate([y, extra])

    def residual(self, y) -> np.ndarray:
        return self._program.residual(self._full_x(y))

    def inequality(self, y) -> np.ndarray:
        if self._g_tape is None:
            return np.zeros(0)
        return self._g_tape.evaluate(self._full_x(y))

    def jacobian(self, y) -> np.ndarray:
        return self._program.jacobian(self._full_x(y))

    def with_rho(self, rho: float) -> "KktSystem":
        """Cheap view sharing the compiled program, bound to another rho."""
        if self.rho is None:
            raise AssemblyError("system is not rho-perturbed")
        return KktSystem(
            kind=self.kind, layout=self.layout, space=self.space,
            F_exprs=self.F_exprs, G_exprs=self.G_exprs, rows_meta=self.rows_meta,
            structure=self.structure, rho=float(rho), positivity=self.positivity,
            slack_pairs=self.slack_pairs, _program=self._program, _g_tape=self._g_tape,
        )


# ----------------------------------------------------------------------
# per-player symbolic structures

@dataclass(eq=False)
class ReducedPlayerData:
    index: int
    n: int
    m_eq: int
    m_ineq: int
    K: int
    z_vars: list
    h_exprs: list
    g_exprs: list
    lagrangians: dict        # k -> Expression
    zgrads: dict             # k -> [Expression] * n_own
    blocks: dict             # (k, role) -> [Var]

    def eta_vars(self, k_from: int) -> list:
        """Flat lower-level dual variables eta_{k_from:K}, layout order."""
        out = []
        for k in range(k_from, self.K + 1):
            for role in ("psi", "phi", "lam", "gam"):
                out.extend(self.blocks.get((k, role), ()))
        return out


@dataclass(eq=False)
class CompletePlayerData:
    index: int
    n: int
    m_eq: int
    m_ineq: int
    K: int
    z_vars: list
    h_exprs: list
    g_exprs: list
    lagrangians: dict
    stat_rows: dict          # k -> rows added at level k (z-part then induced)
    comp_rows: dict          # k -> complementarity rows added at level k
    comp_pairs: dict         # k -> [(ineq_expr, dual_var)]
    blocks: dict             # (k, role) -> [Var]
    psi_chunks: dict         # k -> [(level j, z_len, ind_len)]
    phi_chunks: dict         # k -> [(level j, g_len, dual_len)]


@dataclass(eq=False)
class SystemStructure:
    players: list
    game: LexGame


def _fresh_block(name: str, length: int) -> list:
    return [expr.var(name, t) for t in range(length)]


def _innermost_lagrangian(objective, h_exprs, g_exprs, lam_vars, gam_vars):
    return expr.add(
        objective,
        expr.neg(expr.dot(lam_vars, h_exprs)),
        expr.neg(expr.dot(gam_vars, g_exprs)),
    )


def _build_reduced_player(game: LexGame, i: int) -> ReducedPlayerData:
    pl = game.players[i - 1]
    K, m_e, m_i = pl.levels, pl.m_eq, pl.m_ineq
    zown = [expr.var("z", j) for j in range(game.z_offset(i), game.z_offset(i) + pl.n)]
    h = list(pl.eq_constraints)
    g = list(pl.ineq_constraints)
    blocks = {}
    for k in range(1, K + 1):
        blocks[(k, "psi")] = _fresh_block(f"psi.{i}.{k}", (K - k) * pl.n)
        blocks[(k, "phi")] = _fresh_block(f"phi.{i}.{k}", (K - k) * m_i)
        blocks[(k, "lam")] = _fresh_block(f"lam.{i}.{k}", m_e)
        blocks[(k, "gam")] = _fresh_block(f"gam.{i}.{k}", m_i)

    L = {K: _innermost_lagrangian(pl.objectives[K - 1], h, g,
                                  blocks[(K, "lam")], blocks[(K, "gam")])}
    zgrads = {K: [differentiate(L[K], v) for v in zown]}
    for k in range(K - 1, 0, -1):
        pi_stack = [row for j in range(k + 1, K + 1) for row in zgrads[j]]
        phi_terms = []
        for ell in range(1, K - k + 1):  # phi_{k,ell} pairs g (.) gamma_{K-ell+1}
            seg = blocks[(k, "phi")][(ell - 1) * m_i: ell * m_i]
            deep = blocks[(K - ell + 1, "gam")]
            phi_terms.append(expr.dot(seg, [expr.mul(g[r], deep[r]) for r in range(m_i)]))
        L[k] = expr.add(
            pl.objectives[k - 1],
            expr.neg(expr.dot(blocks[(k, "lam")], h)),
            expr.neg(expr.dot(blocks[(k, "gam")], g)),
            expr.neg(expr.dot(blocks[(k, "psi")], pi_stack)),
            *[expr.neg(t) for t in phi_terms],
        )
        zgrads[k] = [differentiate(L[k], v) for v in zown]
    return ReducedPlayerData(
        index=i, n=pl.n, m_eq=m_e, m_ineq=m_i, K=K, z_vars=zown,
        h_exprs=h, g_exprs=g, lagrangians=L, zgrads=zgrads, blocks=blocks,
    )


def _build_complete_player(game: LexGame, i: int) -> CompletePlayerData:
    pl = game.players[i - 1]
    K, m_e, m_i = pl.levels, pl.m_eq, pl.m_ineq
    zown = [expr.var("z", j) for j in range(game.z_offset(i), game.z_offset(i) + pl.n)]
    h = list(pl.eq_constraints)
    g = list(pl.ineq_constraints)
    blocks = {}
    blocks[(K, "psi")] = []
    blocks[(K, "phi")] = []
    blocks[(K, "lam")] = _fresh_block(f"lam.{i}.{K}", m_e)
    blocks[(K, "gam")] = _fresh_block(f"gam.{i}.{K}", m_i)

    L = {K: _innermost_lagrangian(pl.objectives[K - 1], h, g,
                                  blocks[(K, "lam")], blocks[(K, "gam")])}
    stat_rows = {K: [differentiate(L[K], v) for v in zown]}
    comp_pairs = {K: [(g[r], blocks[(K, "gam")][r]) for r in range(m_i)]}
    comp_rows = {K: [expr.mul(a, b) for a, b in comp_pairs[K]]}
    psi_chunks: dict = {K: []}
    phi_chunks: dict = {K: []}

    def eta_flat(k):
        out = []
        for role in ("psi", "phi", "lam", "gam"):
            out.extend(blocks[(k, role)])
        return out

    for k in range(K - 1, 0, -1):
        stat_stack, psi_meta = [], []
        comp_stack, phi_meta = [], []
        gam_stack = []
        for j in range(k + 1, K + 1):
            z_len = pl.n
            ind_len = len(stat_rows[j]) - z_len
            psi_meta.append((j, z_len, ind_len))
            stat_stack.extend(stat_rows[j])
            dual_len = len(comp_rows[j]) - m_i
            phi_meta.append((j, m_i, dual_len))
            comp_stack.extend(comp_rows[j])
            gam_stack.extend(blocks[(j, "gam")])
        blocks[(k, "psi")] = _fresh_block(f"psi.{i}.{k}", len(stat_stack))
        blocks[(k, "phi")] = _fresh_block(f"phi.{i}.{k}", len(comp_stack))
        blocks[(k, "lam")] = _fresh_block(f"lam.{i}.{k}", m_e)
        blocks[(k, "gam")] = _fresh_block(f"gam.{i}.{k}", m_i + len(gam_stack))
        gam_k = blocks[(k, "gam")]
        L[k] = expr.add(
            pl.objectives[k - 1],
            expr.neg(expr.dot(blocks[(k, "lam")], h)),
            expr.neg(expr.dot(gam_k[:m_i], g)),
            expr.neg(expr.dot(blocks[(k, "psi")], stat_stack)),
            expr.neg(expr.dot(blocks[(k, "phi")], comp_stack)),
            expr.neg(expr.dot(gam_k[m_i:], gam_stack)),
        )
        induced = [v for j in range(k + 1, K + 1) for v in eta_flat(j)]
        stat_rows[k] = ([differentiate(L[k], v) for v in zown]
                        + [differentiate(L[k], u) for u in induced])
        pairs = [(g[r], gam_k[r]) for r in range(m_i)]
        pairs += [(gs, gam_k[m_i + t]) for t, gs in enumerate(gam_stack)]
        comp_pairs[k] = pairs
        comp_rows[k] = [expr.mul(a, b) for a, b in pairs]
        psi_chunks[k] = psi_meta
        phi_chunks[k] = phi_meta

    return CompletePlayerData(
        index=i, n=pl.n, m_eq=m_e, m_ineq=m_i, K=K, z_vars=zown,
        h_exprs=h, g_exprs=g, lagrangians=L, stat_rows=stat_rows,
        comp_rows=comp_rows, comp_pairs=comp_pairs, blocks=blocks,
        psi_chunks=psi_chunks, phi_chunks=phi_chunks,
    )


# ----------------------------------------------------------------------
# layout / space construction

def _dual_segments(players_data, start_offset):
    segments = []
    off = start_offset
    blocks = []
    for pd in players_data:
        for k in range(1, pd.K + 1):
            for role in ("psi", "phi", "lam", "gam"):
                vs = pd.blocks.get((k, role), ())
                if not vs:
                    continue
                segments.append(Segment(pd.index, k, role, off, len(vs)))
                blocks.append((vs[0].name, len(vs)))
                off += len(vs)
    return segments, blocks, off


def _base_layout_and_space(game, players_data, slack: bool, rho_param: bool):
    n = game.n
    segments = []
    off = 0
    for i, pl in enumerate(game.players, start=1):
        segments.append(Segment(i, 0, "z", off, pl.n))
        off += pl.n
    dual_segs, dual_blocks, off = _dual_segments(players_data, off)
    segments.extend(dual_segs)
    space_blocks = [("z", n)] + dual_blocks
    if slack:
        for pd in players_data:
            for k in range(1, pd.K + 1):
                if pd.m_ineq == 0:
                    continue
                segments.append(Segment(pd.index, k, "s", off, pd.m_ineq))
                space_blocks.append((f"s.{pd.index}.{k}", pd.m_ineq))
                off += pd.m_ineq
    if rho_param:
        space_blocks.append(("rho", 1))
    return VariableLayout(segments), VariableSpace(space_blocks)


# ----------------------------------------------------------------------
# public assemblers

def assemble_reduced(game: LexGame) -> KktSystem:
    """Reduced KKT system: per player, stationarity of every level's
    Lagrangian with respect to the player's own primal block, the innermost
    equalities, and one complementarity block per level."""
    validate(game)
    players_data = [_build_reduced_player(game, i) for i in range(1, game.num_players + 1)]
    layout, space = _base_layout_and_space(game, players_data, slack=False, rho_param=False)

    F, G, meta = [], [], []
    for pd in players_data:
        for k in range(1, pd.K + 1):
            F.extend(pd.zgrads[k])
            meta.extend(RowTag(pd.index, k, "stat") for _ in pd.zgrads[k])
        F.extend(pd.h_exprs)
        meta.extend(RowTag(pd.index, pd.K, "eq") for _ in pd.h_exprs)
        for k in range(1, pd.K + 1):
            gam = pd.blocks[(k, "gam")]
            F.extend(expr.mul(pd.g_exprs[r], gam[r]) for r in range(pd.m_ineq))
            meta.extend(RowTag(pd.index, k, "comp") for _ in range(pd.m_ineq))
    for pd in players_data:
        G.extend(pd.g_exprs)
        for k in range(1, pd.K + 1):
            G.extend(pd.blocks[(k, "gam")])

    return KktSystem(
        kind="reduced", layout=layout, space=space, F_exprs=F, G_exprs=G,
        rows_meta=meta, structure=SystemStructure(players_data, game),
        positivity=layout.role_indices("gam"),
    )


def assemble_complete(game: LexGame, dimension_cap: int = DEFAULT_DIMENSION_CAP) -> KktSystem:
    """Complete KKT system, built by the backward recursion in which lower-
    level duals become induced primal variables of the upper levels."""
    validate(game)
    total_vars = sum(
        count_complete(pl.n, pl.m_eq, pl.m_ineq, pl.levels)[0] for pl in game.players
    )
    if total_vars > dimension_cap:
        raise CompleteSystemTooLarge(
            f"complete system too large: {total_vars} variables exceeds the "
            f"cap of {dimension_cap}"
        )
    players_data = [_build_complete_player(game, i) for i in range(1, game.num_players + 1)]
    layout, space = _base_layout_and_space(game, players_data, slack=False, rho_param=False)

    F, G, meta = [], [], []
    for pd in players_data:
        for k in range(1, pd.K):
            zpart = pd.stat_rows[k][: pd.n]
            ind = pd.stat_rows[k][pd.n:]
            F.extend(zpart)
            meta.extend(RowTag(pd.index, k, "stat") for _ in zpart)
            F.extend(ind)
            meta.extend(RowTag(pd.index, k, "stat_ind") for _ in ind)
            F.extend(pd.comp_rows[k])
            meta.extend(
                RowTag(pd.index, k, "comp" if t < pd.m_ineq else "comp_dual")
                for t in range(len(pd.comp_rows[k]))
            )
        F.extend(pd.stat_rows[pd.K])
        meta.extend(RowTag(pd.index, pd.K, "stat") for _ in pd.stat_rows[pd.K])
        F.extend(pd.h_exprs)
        meta.extend(RowTag(pd.index, pd.K, "eq") for _ in pd.h_exprs)
        F.extend(pd.comp_rows[pd.K])
        meta.extend(RowTag(pd.index, pd.K, "comp") for _ in pd.comp_rows[pd.K])
    for pd in players_data:
        G.extend(pd.g_exprs)
        for k in range(1, pd.K + 1):
            G.extend(pd.blocks[(k, "gam")])

    return KktSystem(
        kind="complete", layout=layout, space=space, F_exprs=F, G_exprs=G,
        rows_meta=meta, structure=SystemStructure(players_data, game),
        positivity=layout.role_indices("gam"),
    )


def assemble_perturbed(game: LexGame, rho: float) -> KktSystem:
    """Slack form of the reduced system with complementarity perturbed to
    s (.) gamma = rho 1; see solve() for the homotopy over rho."""
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    return assemble_perturbed_parametric(game).with_rho(rho)


def assemble_perturbed_parametric(game: LexGame) -> KktSystem:
    """Perturbed reduced system with rho held as a trailing parameter;
    bind a value via with_rho()."""
    validate(game)
    players_data = [_build_reduced_player(game, i) for i in range(1, game.num_players + 1)]
    layout, space = _base_layout_and_space(game, players_data, slack=True, rho_param=True)
    rho_var = expr.var("rho", 0)

    F, meta = [], []
    for pd in players_data:
        i = pd.index
        for k in range(1, pd.K + 1):
            F.extend(pd.zgrads[k])
            meta.extend(RowTag(i, k, "stat") for _ in pd.zgrads[k])
        F.extend(pd.h_exprs)
        meta.extend(RowTag(i, pd.K, "eq") for _ in pd.h_exprs)
        for k in range(1, pd.K + 1):
            svars = [expr.var(f"s.{i}.{k}", r) for r in range(pd.m_ineq)]
            F.extend(expr.sub(pd.g_exprs[r], svars[r]) for r in range(pd.m_ineq))
            meta.extend(RowTag(i, k, "slack_def") for _ in range(pd.m_ineq))
        for k in range(1, pd.K + 1):
            svars = [expr.var(f"s.{i}.{k}", r) for r in range(pd.m_ineq)]
            gam = pd.blocks[(k, "gam")]
            F.extend(
                expr.sub(expr.mul(svars[r], gam[r]), rho_var) for r in range(pd.m_ineq)
            )
            meta.extend(RowTag(i, k, "comp_slack") for _ in range(pd.m_ineq))

    pairs = [[], []]
    for pd in players_data:
        for k in range(1, pd.K + 1):
            s_sl = layout.slice_of(pd.index, k, "s")
            g_sl = layout.slice_of(pd.index, k, "gam")
            pairs[0].extend(range(s_sl.start, s_sl.stop))
            pairs[1].extend(range(g_sl.start, g_sl.stop))

    return KktSystem(
        kind="perturbed-reduced", layout=layout, space=space, F_exprs=F,
        G_exprs=[], rows_meta=meta, structure=SystemStructure(players_data, game),
        rho=1.0, positivity=layout.role_indices("gam", "s"),
        slack_pairs=np.array(pairs, dtype=int),
    )


def assemble_complete_perturbed(game: LexGame,
                                dimension_cap: int = DEFAULT_DIMENSION_CAP) -> KktSystem:
    """Algorithm 1 adapted to the complete system: every complementarity
    row a*b of F-bar gets a slack (a - s = 0, s*b = rho) and positivity is
    enforced on all slacks and all gamma blocks."""
    plain = assemble_complete(game, dimension_cap)
    players_data = plain.structure.players
    game_ = plain.structure.game
    rho_var = expr.var("rho", 0)

    n = game_.n
    segments = []
    off = 0
    for i, pl in enumerate(game_.players, start=1):
        segments.append(Segment(i, 0, "z", off, pl.n))
        off += pl.n
    dual_segs, dual_blocks, off = _dual_segments(players_data, off)
    segments.extend(dual_segs)
    space_blocks = [("z", n)] + dual_blocks

    F, meta = [], []
    comp_terms = []
    pair_vars = []
    for pd in players_data:
        i = pd.index
        slack_count = sum(len(pd.comp_pairs[k]) for k in range(1, pd.K + 1))
        if slack_count:
            segments.append(Segment(i, 0, "s", off, slack_count))
            space_blocks.append((f"s.{i}.0", slack_count))
            off += slack_count
        svars = [expr.var(f"s.{i}.0", t) for t in range(slack_count)]
        t = 0
        slack_rows, slack_meta = [], []

        def _slackize(k, a, b, t):
            slack_rows.append(expr.sub(a, svars[t]))
            slack_meta.append(RowTag(i, k, "slack_def"))
            comp_terms.append((expr.sub(expr.mul(svars[t], b), rho_var),
                               RowTag(i, k, "comp_slack")))
            pair_vars.append((svars[t], b))

        for k in range(1, pd.K):
            F.extend(pd.stat_rows[k])
            meta.extend(
                RowTag(i, k, "stat" if r < pd.n else "stat_ind")
                for r in range(len(pd.stat_rows[k]))
            )
            for a, b in pd.comp_pairs[k]:
                _slackize(k, a, b, t)
                t += 1
        F.extend(pd.stat_rows[pd.K])
        meta.extend(RowTag(i, pd.K, "stat") for _ in pd.stat_rows[pd.K])
        F.extend(pd.h_exprs)
        meta.extend(RowTag(i, pd.K, "eq") for _ in pd.h_exprs)
        for a, b in pd.comp_pairs[pd.K]:
            _slackize(pd.K, a, b, t)
            t += 1
        F.extend(slack_rows)
        meta.extend(slack_meta)
    for row, tag in comp_terms:
        F.append(row)
        meta.append(tag)

    space_blocks.append(("rho", 1))
    layout = VariableLayout(segments)
    space = VariableSpace(space_blocks)
    pairs = np.array(
        [[space.flat_index(s) for s, _ in pair_vars],
         [space.flat_index(b) for _, b in pair_vars]], dtype=int,
    ) if pair_vars else np.zeros((2, 0), dtype=int)
    return KktSystem(
        kind="perturbed-complete", layout=layout, space=space, F_exprs=F,
        G_exprs=[], rows_meta=meta, structure=plain.structure,
        rho=1.0, positivity=layout.role_indices("gam", "s"),
        slack_pairs=pairs,
    )


# ----------------------------------------------------------------------
# finite-difference Jacobian check

def jacobian_fd_check(system: KktSystem, point, step: float = 1e-6) -> float:
    """Max absolute deviation between the analytic Jacobian and a central
    finite difference of the residual at the given point."""
    y = point.vector if isinstance(point, Candidate) else np.asarray(point, dtype=float)
    J = system.jacobian(y)
    worst = 0.0
    for j in range(len(y)):
        yp, ym = y.copy(), y.copy()
        yp[j] += step
        ym[j] -= step
        col = (system.residual(yp) - system.residual(ym)) / (2 * step)
        dev = np.max(np.abs(col - J[:, j])) if col.size else 0.0
        worst = max(worst, float(dev))
    return worst


# ----------------------------------------------------------------------
# dual lifting (complete solution -> reduced solution, same primal)

class LiftPreconditionError(Exception):
    pass


@dataclass
class LiftInfo:
    recipe_residual: float
    final_residual: float
    refined: bool


def lift_duals(game: LexGame, complete_solution: Candidate, tol: float = 1e-8,
               reduced_system: KktSystem | None = None,
               complete_system: KktSystem | None = None) -> Candidate:
    cand, _ = lift_duals_with_info(game, complete_solution, tol,
                                   reduced_system, complete_system)
    return cand


def lift_duals_with_info(game: LexGame, complete_solution: Candidate,
                         tol: float = 1e-8,
                         reduced_system: KktSystem | None = None,
                         complete_system: KktSystem | None = None):
    """Reduced-system candidate at the same primal point.

    Keeps, per level, the components of psi-bar that multiply own-primal
    stationarity rows and the components of phi-bar that multiply g (.)
    gamma rows; lambda is kept whole and gamma keeps its first m_I
    components.  If the retained multipliers leave a stationarity residual
    above tol, the free multipliers (psi, phi, lambda) are polished by a
    minimum-norm least-squares correction, level by level from the deepest;
    the primal point and the gamma blocks are never touched.
    """
    csys = complete_system or assemble_complete(game)
    rsys = reduced_system or assemble_reduced(game)
    cF = csys.residual(complete_solution)
    cG = csys.inequality(complete_solution)
    if np.max(np.abs(cF), initial=0.0) > 10 * tol or (cG.size and cG.min() < -10 * tol):
        raise LiftPreconditionError(
            "input does not solve the complete system: "
            f"|F|={np.max(np.abs(cF), initial=0.0):.2e}, "
            f"min G={cG.min() if cG.size else 0.0:.2e}"
        )

    out = zero_candidate(rsys.layout)
    zidx = rsys.layout.role_indices("z")
    out.vector[zidx] = complete_solution.vector[csys.layout.role_indices("z")]

    for pd in csys.structure.players:
        i, K, m_i = pd.index, pd.K, pd.m_ineq
        for k in range(1, K + 1):
            out.set_block(i, k, "lam", complete_solution.block(i, k, "lam"))
            gam_bar = complete_solution.block(i, k, "gam")
            out.set_block(i, k, "gam", gam_bar[:m_i])
            if k == K:
                continue
            psi_bar = complete_solution.block(i, k, "psi")
            psi_red, pos = [], 0
            for (_, z_len, ind_len) in pd.psi_chunks[k]:
                psi_red.append(psi_bar[pos: pos + z_len])
                pos += z_len + ind_len
            out.set_block(i, k, "psi", np.concatenate(psi_red) if psi_red else [])
            phi_bar = complete_solution.block(i, k, "phi")
            chunk_start = {}
            pos = 0
            for (j, g_len, dual_len) in pd.phi_chunks[k]:
                chunk_start[j] = pos
                pos += g_len + dual_len
            phi_red = [phi_bar[chunk_start[K - ell + 1]: chunk_start[K - ell + 1] + m_i]
                       for ell in range(1, K - k + 1)]
            out.set_block(i, k, "phi", np.concatenate(phi_red) if phi_red else [])

    recipe_res = float(np.max(np.abs(rsys.residual(out)), initial=0.0))
    final_res = recipe_res
    refined = False
    if recipe_res > tol:
        refined = True
        _polish_free_duals(rsys, out)
        final_res = float(np.max(np.abs(rsys.residual(out)), initial=0.0))
    return out, LiftInfo(recipe_res, final_res, refined)


def _polish_free_duals(rsys: KktSystem, cand: Candidate):
    """Least-squares correction of (psi, phi, lambda) per player and level,
    deepest level first, holding z and every gamma block fixed."""
    space = rsys.space
    for pd in rsys.structure.players:
        for k in range(pd.K - 1, 0, -1):
            rows = pd.zgrads[k]
            free = (pd.blocks[(k, "psi")] + pd.blocks[(k, "phi")]
                    + pd.blocks[(k, "lam")])
            if not free:
                continue
            x = cand.vector
            point_rows = Tape(rows, space).evaluate(x)
            cols = [differentiate(r, v) for r in rows for v in free]
            A = Tape(cols, space).evaluate(x).reshape(len(rows), len(free))
            delta = linalg.pinv_solve(A, -point_rows)
            flat = [space.flat_index(v) for v in free]
            cand.vector[flat] += delta
