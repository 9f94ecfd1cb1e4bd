"""Problem instances for N-player games of ordered preference.

Two representations:

* ``LexGame`` -- general instances; objectives and constraints are symbolic
  expressions over the single flat block ``z`` of all players' decisions.
* ``QuadraticLexGame`` -- quadratic objectives 1/2 z'Q z + q'z with linear
  constraints H z = h and G z >= g, stored as dense matrices.

Sign conventions are frozen once for both paths: inequality rows mean
g(z) >= 0 in the general form, and the quadratic form's G z >= g is held
internally as g~(z) = G z - g >= 0, so KKT assembly sees one convention.

Instances are immutable after validation and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr
from .expr import Expression, VariableSpace


class ValidationError(Exception):
    """Structurally inconsistent problem instance."""


@dataclass(frozen=True, eq=False)
class PlayerSpec:
    """One player's hierarchy: objectives level 1 (top) .. K (innermost),
    plus the innermost equality rows h (= 0) and inequality rows g (>= 0)."""

    n: int
    objectives: tuple
    eq_constraints: tuple = ()
    ineq_constraints: tuple = ()

    @property
    def levels(self) -> int:
        return len(self.objectives)

    @property
    def m_eq(self) -> int:
        return len(self.eq_constraints)

    @property
    def m_ineq(self) -> int:
        return len(self.ineq_constraints)


@dataclass(frozen=True, eq=False)
class LexGame:
    players: tuple

    @property
    def num_players(self) -> int:
        return len(self.players)

    @property
    def n(self) -> int:
        return sum(p.n for p in self.players)

    @property
    def space(self) -> VariableSpace:
        return VariableSpace([("z", self.n)])

    def z_offset(self, i: int) -> int:
        """Flat offset of player i's block in z (players are 1-based)."""
        return sum(p.n for p in self.players[: i - 1])

    def z_slice(self, i: int) -> slice:
        off = self.z_offset(i)
        return slice(off, off + self.players[i - 1].n)


@dataclass(frozen=True, eq=False)
class QuadraticLexGame:
    """Per player i and level k: Q[i][k] (n x n), q[i][k] (n,);
    per player: H (m_eq x n), h, G (m_ineq x n), g.  Players may have
    different level counts until pad_levels unifies them."""

    Q: tuple  # Q[i-1][k-1] -> (n, n)
    q: tuple
    H: tuple
    h: tuple
    G: tuple
    g: tuple
    n_per_player: tuple

    @property
    def num_players(self) -> int:
        return len(self.n_per_player)

    @property
    def n(self) -> int:
        return int(sum(self.n_per_player))

    @property
    def levels_per_player(self) -> tuple:
        return tuple(len(qs) for qs in self.Q)

    @property
    def max_levels(self) -> int:
        return max(self.levels_per_player)

    def m_eq(self, i: int) -> int:
        return self.H[i - 1].shape[0]

    def m_ineq(self, i: int) -> int:
        return self.G[i - 1].shape[0]

    def z_offset(self, i: int) -> int:
        return int(sum(self.n_per_player[: i - 1]))

    def z_slice(self, i: int) -> slice:
        off = self.z_offset(i)
        return slice(off, off + self.n_per_player[i - 1])

    def own_block(self, i: int, A: np.ndarray) -> np.ndarray:
        """Columns of A belonging to player i's decision variables."""
        return A[:, self.z_slice(i)]


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


PSD_TOL = -1e-10


def _expr_indices(e: Expression):
    for v in e.support:
        yield v


def validate(problem) -> ValidationReport:
    """Check dimension consistency and, for quadratic instances, PSD of the
    own diagonal blocks and full row rank of the block-diagonal equality
    Jacobian.  Compactness and MPCC-LICQ are not checkable and are flagged
    as asserted by the user.

    Structural inconsistency raises ValidationError; numerical regularity
    failures become warnings.
    """
    report = ValidationReport()
    if isinstance(problem, LexGame):
        _validate_general(problem, report)
    elif isinstance(problem, QuadraticLexGame):
        _validate_quadratic(problem, report)
    else:
        raise ValidationError(f"unknown problem type {type(problem).__name__}")
    report.notes.append("compactness of innermost feasible sets: asserted by user")
    report.notes.append("MPCC-LICQ: asserted by user")
    if report.errors:
        raise ValidationError("; ".join(report.errors))
    return report


def _validate_general(p: LexGame, report: ValidationReport):
    n = p.n
    if not p.players:
        report.errors.append("no players")
        return
    for i, pl in enumerate(p.players, start=1):
        if pl.n < 1:
            report.errors.append(f"player {i}: n must be >= 1")
        if pl.levels < 1:
            report.errors.append(f"player {i}: needs at least one preference level")
        for e in (*pl.objectives, *pl.eq_constraints, *pl.ineq_constraints):
            for v in _expr_indices(e):
                if v.name != "z" or not (0 <= v.index < n):
                    report.errors.append(
                        f"player {i}: expression references undeclared "
                        f"variable {v.name}[{v.index}] (z has dimension {n})"
                    )
        if pl.m_eq == 0 and pl.m_ineq == 0:
            report.warnings.append(
                f"player {i}: no constraints at all; innermost feasible set "
                "cannot be compact"
            )


def _validate_quadratic(p: QuadraticLexGame, report: ValidationReport):
    from . import linalg

    n = p.n
    N = p.num_players
    if not (len(p.Q) == len(p.q) == len(p.H) == len(p.h) == len(p.G) == len(p.g) == N):
        report.errors.append("per-player field lengths disagree")
        return
    for i in range(1, N + 1):
        Qs, qs = p.Q[i - 1], p.q[i - 1]
        if len(Qs) != len(qs) or len(Qs) < 1:
            report.errors.append(f"player {i}: Q/q level counts disagree or empty")
            continue
        for k, (Qk, qk) in enumerate(zip(Qs, qs), start=1):
            if Qk.shape != (n, n) or qk.shape != (n,):
                report.errors.append(f"player {i} level {k}: Q/q shape mismatch")
                continue
            own = Qk[p.z_slice(i), p.z_slice(i)]
            if not np.allclose(own, own.T, atol=1e-12):
                report.warnings.append(
                    f"player {i} level {k}: own diagonal block not symmetric"
                )
            w = np.linalg.eigvalsh(0.5 * (own + own.T))
            if w.size and w[0] < PSD_TOL:
                report.warnings.append(
                    f"player {i} level {k}: own diagonal block not PSD "
                    f"(min eigenvalue {w[0]:.3e})"
                )
        for M, v, tag in ((p.H[i - 1], p.h[i - 1], "H/h"), (p.G[i - 1], p.g[i - 1], "G/g")):
            if M.ndim != 2 or M.shape[1] != n or v.shape != (M.shape[0],):
                report.errors.append(f"player {i}: {tag} shape mismatch")
        if p.m_eq(i) == 0 and p.m_ineq(i) == 0:
            report.warnings.append(f"player {i}: no constraints at all")
    if not report.errors:
        blocks = [p.own_block(i, p.H[i - 1]) for i in range(1, N + 1)]
        for i, blk in enumerate(blocks, start=1):
            if blk.shape[0] and linalg.numerical_rank(blk) < blk.shape[0]:
                report.warnings.append(
                    f"player {i}: diagonal equality block H_i^i is row-rank deficient"
                )


def pad_levels(p: QuadraticLexGame, K: int) -> QuadraticLexGame:
    """Give every player exactly K levels by appending zero-objective inner
    levels; constraints stay attached to the (new) deepest level.  Preserves
    the PSD regularity trivially."""
    if K < p.max_levels:
        raise ValueError(f"K={K} is below the deepest existing hierarchy ({p.max_levels})")
    n = p.n
    newQ, newq = [], []
    for Qs, qs in zip(p.Q, p.q):
        pad = K - len(Qs)
        newQ.append(tuple(Qs) + tuple(np.zeros((n, n)) for _ in range(pad)))
        newq.append(tuple(qs) + tuple(np.zeros(n) for _ in range(pad)))
    return QuadraticLexGame(
        Q=tuple(newQ), q=tuple(newq), H=p.H, h=p.h, G=p.G, g=p.g,
        n_per_player=p.n_per_player,
    )


def lift_quadratic(p: QuadraticLexGame) -> LexGame:
    """Expression form of a quadratic instance: objectives evaluate to
    1/2 z'Qz + q'z, equalities to Hz - h, inequalities to Gz - g (>= 0)."""
    n = p.n
    zv = [expr.var("z", j) for j in range(n)]
    players = []
    for i in range(1, p.num_players + 1):
        objectives = []
        for Qk, qk in zip(p.Q[i - 1], p.q[i - 1]):
            terms = []
            for a in range(n):
                row = Qk[a]
                for b in range(n):
                    if row[b] != 0.0:
                        terms.append(expr.mul(0.5 * row[b], zv[a], zv[b]))
                if qk[a] != 0.0:
                    terms.append(expr.mul(qk[a], zv[a]))
            objectives.append(expr.add(*terms))
        eqs = tuple(_affine_row(p.H[i - 1][r], -p.h[i - 1][r], zv)
                    for r in range(p.m_eq(i)))
        ineqs = tuple(_affine_row(p.G[i - 1][r], -p.g[i - 1][r], zv)
                      for r in range(p.m_ineq(i)))
        players.append(PlayerSpec(
            n=int(p.n_per_player[i - 1]),
            objectives=tuple(objectives),
            eq_constraints=eqs,
            ineq_constraints=ineqs,
        ))
    return LexGame(players=tuple(players))


def _affine_row(coeffs, offset, zv):
    terms = [expr.mul(c, v) for c, v in zip(coeffs, zv) if c != 0.0]
    if offset != 0.0:
        terms.append(expr.const(offset))
    return expr.add(*terms)


# problem file format --------------------------------------------------

def game_to_json(p) -> dict:
    """UTF-8 JSON problem document.

    General form: {"players": [{"n", "K", "objectives", "h", "g"}]} with
    s-expression strings.  Quadratic form: {"quadratic": {"N", "n",
    "levels", "Q", "q", "H", "h", "G", "g"}} with row-major dense
    matrices nested per player (and per level for Q, q).
    """
    if isinstance(p, LexGame):
        return {
            "players": [
                {
                    "n": pl.n,
                    "K": pl.levels,
                    "objectives": [expr.to_sexpr(e) for e in pl.objectives],
                    "h": [expr.to_sexpr(e) for e in pl.eq_constraints],
                    "g": [expr.to_sexpr(e) for e in pl.ineq_constraints],
                }
                for pl in p.players
            ]
        }
    if isinstance(p, QuadraticLexGame):
        levels = p.levels_per_player
        return {
            "quadratic": {
                "N": p.num_players,
                "n": list(p.n_per_player),
                "levels": levels[0] if len(set(levels)) == 1 else list(levels),
                "Q": [[Qk.ravel().tolist() for Qk in Qs] for Qs in p.Q],
                "q": [[qk.tolist() for qk in qs] for qs in p.q],
                "H": [Hi.ravel().tolist() for Hi in p.H],
                "h": [hi.tolist() for hi in p.h],
                "G": [Gi.ravel().tolist() for Gi in p.G],
                "g": [gi.tolist() for gi in p.g],
            }
        }
    raise ValidationError(f"unknown problem type {type(p).__name__}")


def game_from_json(doc: dict):
    if "players" in doc:
        players = []
        for rec in doc["players"]:
            objectives = tuple(expr.parse_sexpr(s) for s in rec["objectives"])
            if rec.get("K") is not None and rec["K"] != len(objectives):
                raise ValidationError("player K field disagrees with objectives list")
            players.append(PlayerSpec(
                n=int(rec["n"]),
                objectives=objectives,
                eq_constraints=tuple(expr.parse_sexpr(s) for s in rec.get("h", ())),
                ineq_constraints=tuple(expr.parse_sexpr(s) for s in rec.get("g", ())),
            ))
        return LexGame(players=tuple(players))
    if "quadratic" in doc:
        rec = doc["quadratic"]
        n_per = tuple(int(v) for v in rec["n"])
        n = sum(n_per)
        levels = rec["levels"]
        Ks = [levels] * len(n_per) if isinstance(levels, int) else list(levels)
        Q = tuple(
            tuple(np.array(Qk, dtype=float).reshape(n, n) for Qk in Qs)
            for Qs in rec["Q"]
        )
        q = tuple(tuple(np.array(qk, dtype=float) for qk in qs) for qs in rec["q"])
        H, h, G, g = [], [], [], []
        for i in range(len(n_per)):
            hi = np.array(rec["h"][i], dtype=float)
            gi = np.array(rec["g"][i], dtype=float)
            H.append(np.array(rec["H"][i], dtype=float).reshape(len(hi), n))
            G.append(np.array(rec["G"][i], dtype=float).reshape(len(gi), n))
            h.append(hi)
            g.append(gi)
        p = QuadraticLexGame(Q=Q, q=q, H=tuple(H), h=tuple(h), G=tuple(G),
                             g=tuple(g), n_per_player=n_per)
        if p.levels_per_player != tuple(Ks):
            raise ValidationError("levels field disagrees with Q/q lists")
        return p
    raise ValidationError("problem document needs a 'players' or 'quadratic' key")


def save_game(p, path: str):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(game_to_json(p), f, indent=1)


def load_game(path: str):
    with open(path, "r", encoding="utf-8") as f:
        return game_from_json(json.load(f))
