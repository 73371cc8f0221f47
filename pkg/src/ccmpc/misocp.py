"""Mixed-integer second-order-cone programs with disjunctive face groups.

A problem over continuous variables ``y`` reads

    minimise    0.5 y'Py + q'y + r
    subject to  A_eq y = b_eq,   G y <= h,
                sum_m ||F_m y + g_m|| + a'y + c <= M z_row     (cone rows)
                sum_{row in group} z_row = |group| - 1,  z binary.

Each group therefore has exactly one *active* row (z = 0); the others are
relaxed by the big-M constant.  Assignments are tuples holding, per group,
the position of the active row inside the group.

Convex subproblems go to Clarabel.  The mixed-integer search is a best-first
branch-and-bound that branches on which row of a group is active.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
import math
import time
from dataclasses import dataclass, field

import clarabel
import numpy as np
from scipy import sparse

FEAS_TOL = 1e-6
MAX_IPM_ITER = 200


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    TIME_LIMIT = "time_limit"


class ProblemFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ConeRow:
    terms: tuple          # ((F, g), ...) norm terms
    a: np.ndarray
    c: float
    big_m: float
    tag: tuple = ()

    def value(self, y) -> float:
        y = np.asarray(y, dtype=float)
        total = float(self.a @ y) + self.c
        for f, g in self.terms:
            total += float(np.linalg.norm(f @ y + g))
        return total


@dataclass
class Misocp:
    n: int
    P: sparse.csc_matrix
    q: np.ndarray
    r: float = 0.0
    A_eq: sparse.csc_matrix | None = None
    b_eq: np.ndarray | None = None
    G: sparse.csc_matrix | None = None
    h: np.ndarray | None = None
    rows: list = field(default_factory=list)
    groups: list = field(default_factory=list)      # lists of row indices
    names: dict = field(default_factory=dict)       # name -> slice, for callers

    def __post_init__(self):
        self.P = sparse.csc_matrix(self.P, shape=(self.n, self.n))
        self.q = np.asarray(self.q, dtype=float).reshape(self.n)
        if self.A_eq is None:
            self.A_eq, self.b_eq = sparse.csc_matrix((0, self.n)), np.zeros(0)
        if self.G is None:
            self.G, self.h = sparse.csc_matrix((0, self.n)), np.zeros(0)
        self.A_eq = sparse.csc_matrix(self.A_eq)
        self.G = sparse.csc_matrix(self.G)
        self.b_eq = np.asarray(self.b_eq, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        grouped = sorted(i for g in self.groups for i in g)
        if grouped != list(range(len(self.rows))):
            raise ProblemFormatError("every cone row must belong to exactly one group")
        if any(len(g) == 0 for g in self.groups):
            raise ProblemFormatError("empty group")
        self._template = None

    @property
    def n_binaries(self) -> int:
        return len(self.rows)

    def objective(self, y) -> float:
        y = np.asarray(y, dtype=float)
        return float(0.5 * y @ (self.P @ y) + self.q @ y + self.r)

    def binaries(self, assignment) -> np.ndarray:
        z = np.ones(len(self.rows))
        for g, member in zip(self.groups, assignment):
            z[g[member]] = 0.0
        return z

    def max_violation(self, y, assignment) -> float:
        """Largest constraint violation of ``y`` under a full assignment."""
        y = np.asarray(y, dtype=float)
        worst = 0.0
        if self.A_eq.shape[0]:
            worst = max(worst, float(np.max(np.abs(self.A_eq @ y - self.b_eq))))
        if self.G.shape[0]:
            worst = max(worst, float(np.max(self.G @ y - self.h)))
        z = self.binaries(assignment)
        for row, zi in zip(self.rows, z):
            worst = max(worst, row.value(y) - row.big_m * zi)
        return worst

    def canonical_assignment(self, y, tol: float = FEAS_TOL):
        """Lowest-index row of every group satisfied at ``y``; None if a group has none."""
        out = []
        for g in self.groups:
            pick = next((m for m, ri in enumerate(g) if self.rows[ri].value(y) <= tol), None)
            if pick is None:
                return None
            out.append(pick)
        return tuple(out)


@dataclass
class SolveResult:
    status: SolveStatus
    objective: float
    primal: np.ndarray | None
    assignment: tuple | None
    node_count: int = 0
    solve_time: float = 0.0
    relaxed_z: np.ndarray | None = None
    incumbent_trace: list = field(default_factory=list)
    bound: float = -math.inf

    @property
    def feasible(self) -> bool:
        return self.status is SolveStatus.OPTIMAL or (self.status is SolveStatus.TIME_LIMIT
                                                      and self.primal is not None)


# ---------------------------------------------------------------------------
# convex subproblem


@dataclass
class _Template:
    P: sparse.csc_matrix
    q: np.ndarray
    A: sparse.csc_matrix
    b: np.ndarray
    zfix_rows: np.ndarray        # row index in A of "z_i = value" equality, per binary
    zbound_rows: np.ndarray      # (n_z, 2) rows of 0 <= z_i and z_i <= 1
    n_y: int
    n_z: int
    sizes: list                  # dimension of every cone, in order
    kinds: list                  # "zero", "nn" or "soc"


def _template(p: Misocp) -> _Template:
    """Assemble the static conic data; only b changes between nodes."""
    if p._template is not None:
        return p._template
    n_y, n_z = p.n, len(p.rows)
    multi = [i for i, row in enumerate(p.rows) if len(row.terms) > 1]
    w_index, n_w = {}, 0
    for i in multi:
        w_index[i] = n_w
        n_w += len(p.rows[i].terms)
    nv = n_y + n_z + n_w
    blocks, rhs, cones = [], [], []

    def pad(mat, col0=0):
        mat = sparse.coo_matrix(mat)
        return sparse.coo_matrix((mat.data, (mat.row, mat.col + col0)), shape=(mat.shape[0], nv))

    # zero cone: dynamics, group cardinality, z fixings
    zero = [pad(p.A_eq)]
    zrhs = [p.b_eq]
    card = sparse.lil_matrix((len(p.groups), nv))
    for gi, g in enumerate(p.groups):
        for ri in g:
            card[gi, n_y + ri] = 1.0
    zero.append(card)
    zrhs.append(np.array([len(g) - 1.0 for g in p.groups]))
    zfix = sparse.coo_matrix((np.ones(n_z), (np.arange(n_z), n_y + np.arange(n_z))), shape=(n_z, nv))
    zero.append(zfix)
    zrhs.append(np.zeros(n_z))
    n_zero = sum(b.shape[0] for b in zero)
    zfix_rows = np.arange(n_zero - n_z, n_zero)
    blocks += zero
    rhs += zrhs
    cones.append(("zero", n_zero))

    # nonnegative cone: G y <= h, 0 <= z <= 1, epigraph sums
    nn = [pad(p.G)]
    nrhs = [p.h]
    base = n_zero + p.G.shape[0]
    zbound_rows = np.column_stack([base + np.arange(n_z), base + n_z + np.arange(n_z)])
    eye = sparse.identity(n_z, format="coo")
    nn += [pad(-eye, n_y), pad(eye, n_y)]
    nrhs += [np.zeros(n_z), np.ones(n_z)]
    for i in multi:
        row = p.rows[i]
        line = np.zeros(nv)
        line[:n_y] = row.a
        line[n_y + i] = -row.big_m
        line[n_y + n_z + w_index[i]: n_y + n_z + w_index[i] + len(row.terms)] = 1.0
        nn.append(sparse.coo_matrix(line.reshape(1, -1)))
        nrhs.append(np.array([-row.c]))
    linear = [i for i, row in enumerate(p.rows) if len(row.terms) == 0]
    for i in linear:
        row = p.rows[i]
        line = np.zeros(nv)
        line[:n_y] = row.a
        line[n_y + i] = -row.big_m
        nn.append(sparse.coo_matrix(line.reshape(1, -1)))
        nrhs.append(np.array([-row.c]))
    n_nn = sum(b.shape[0] for b in nn)
    blocks += nn
    rhs += nrhs
    cones.append(("nn", n_nn))

    # second-order cones
    for i, row in enumerate(p.rows):
        if len(row.terms) == 1:
            f, g = row.terms[0]
            head = np.zeros(nv)
            head[:n_y] = row.a
            head[n_y + i] = -row.big_m
            blocks.append(sparse.coo_matrix(head.reshape(1, -1)))
            rhs.append(np.array([-row.c]))
            blocks.append(pad(-np.asarray(f)))
            rhs.append(np.asarray(g, dtype=float))
            cones.append(("soc", 1 + len(g)))
        elif len(row.terms) > 1:
            for m, (f, g) in enumerate(row.terms):
                head = np.zeros(nv)
                head[n_y + n_z + w_index[i] + m] = -1.0
                blocks.append(sparse.coo_matrix(head.reshape(1, -1)))
                rhs.append(np.zeros(1))
                blocks.append(pad(-np.asarray(f)))
                rhs.append(np.asarray(g, dtype=float))
                cones.append(("soc", 1 + len(g)))

    A = sparse.vstack(blocks, format="csc")
    P = sparse.block_diag([p.P, sparse.csc_matrix((n_z + n_w, n_z + n_w))], format="csc")
    P = sparse.triu(P, format="csc")
    q = np.concatenate([p.q, np.zeros(n_z + n_w)])
    p._template = _Template(P, q, A, np.concatenate(rhs), zfix_rows, zbound_rows, n_y, n_z,
                            [c[1] for c in cones], [c[0] for c in cones])
    return p._template


def _settings(max_iter: int = MAX_IPM_ITER):
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = max_iter
    s.tol_gap_rel = 1e-9
    s.tol_gap_abs = 1e-9
    s.tol_feas = 1e-9
    s.presolve_enable = False
    return s


_SOLVED = {"Solved", "AlmostSolved"}
_INFEASIBLE = {"PrimalInfeasible", "AlmostPrimalInfeasible"}


def _status_name(status) -> str:
    return str(status).split(".")[-1]


def _node_data(t: _Template, assignment, groups):
    """Per-node data: fixed groups pin their z, relaxed groups drop the pin rows.

    Fixed binaries also lose their [0, 1] bound rows, which would otherwise be
    tight at every feasible point and leave the cone program without an
    interior.
    """
    b = t.b.copy()
    fixed = np.zeros(t.n_z, dtype=bool)
    for gi, member in enumerate(assignment):
        if member is None:
            continue
        for m, ri in enumerate(groups[gi]):
            fixed[ri] = True
            b[t.zfix_rows[ri]] = 0.0 if m == member else 1.0
    keep = np.ones(t.A.shape[0], dtype=bool)
    keep[t.zfix_rows[~fixed]] = False
    keep[t.zbound_rows[fixed].ravel()] = False
    sizes = list(t.sizes)
    sizes[0] -= int(np.count_nonzero(~fixed))
    sizes[1] -= 2 * int(np.count_nonzero(fixed))
    return keep, b, sizes


def _cones(kinds, sizes):
    make = {"zero": clarabel.ZeroConeT, "nn": clarabel.NonnegativeConeT, "soc": clarabel.SecondOrderConeT}
    return [make[k](s) for k, s in zip(kinds, sizes) if s > 0]


def solve_convex(p: Misocp, assignment=None, max_iter: int = MAX_IPM_ITER) -> SolveResult:
    """Solve the relaxation with some groups fixed (None entries stay relaxed)."""
    t0 = time.perf_counter()
    tpl = _template(p)
    if assignment is None:
        assignment = (None,) * len(p.groups)
    keep, b, sizes = _node_data(tpl, assignment, p.groups)
    A, bb = tpl.A, b
    if not keep.all():
        A = tpl.A[np.flatnonzero(keep)]
        bb = b[keep]
    solver = clarabel.DefaultSolver(tpl.P, tpl.q, A, bb, _cones(tpl.kinds, sizes), _settings(max_iter))
    sol = solver.solve()
    name = _status_name(sol.status)
    ny, nz = tpl.n_y, tpl.n_z

    def result(status, with_x=True):
        if not with_x:
            return SolveResult(status, math.inf, None, None, 1, time.perf_counter() - t0)
        x = np.asarray(sol.x)
        y = x[:ny]
        return SolveResult(status, p.objective(y), y, _full(assignment), 1, time.perf_counter() - t0,
                           x[ny:ny + nz])

    if name in _SOLVED:
        return result(SolveStatus.OPTIMAL)
    if name in _INFEASIBLE:
        return result(SolveStatus.INFEASIBLE, False)
    if name == "MaxIterations":
        return result(SolveStatus.TIME_LIMIT)
    # numerical trouble: decide feasibility with a phase-1 problem
    if _phase_one(A, bb, tpl.kinds, sizes) > FEAS_TOL:
        return result(SolveStatus.INFEASIBLE, False)
    return result(SolveStatus.TIME_LIMIT)


def _full(assignment):
    return tuple(assignment) if all(a is not None for a in assignment) else None


def _phase_one(A, b, kinds, sizes) -> float:
    """Smallest uniform slack s >= 0 that makes every inequality and cone head hold."""
    m, nv = A.shape
    col = np.zeros(m)
    offset = 0
    for kind, size in zip(kinds, sizes):
        if kind == "nn":
            col[offset:offset + size] = -1.0
        elif kind == "soc":
            col[offset] = -1.0
        offset += size
    A1 = sparse.hstack([A, sparse.csc_matrix(col.reshape(-1, 1))], format="csc")
    A1 = sparse.vstack([A1, sparse.csc_matrix(([-1.0], ([0], [nv])), shape=(1, nv + 1))], format="csc")
    b1 = np.concatenate([b, [0.0]])
    q1 = np.zeros(nv + 1)
    q1[-1] = 1.0
    cones = _cones(list(kinds) + ["nn"], list(sizes) + [1])
    sol = clarabel.DefaultSolver(sparse.csc_matrix((nv + 1, nv + 1)), q1, A1, b1, cones, _settings()).solve()
    if _status_name(sol.status) not in _SOLVED:
        return math.inf
    return float(sol.x[-1])


# ---------------------------------------------------------------------------
# branch-and-bound


def _repair(p: Misocp, y, assignment, tol: float):
    """Complete a partial assignment from rows already satisfied at ``y``."""
    out = list(assignment)
    for gi, member in enumerate(assignment):
        if member is not None:
            continue
        pick = next((m for m, ri in enumerate(p.groups[gi]) if p.rows[ri].value(y) <= tol), None)
        if pick is None:
            return None
        out[gi] = pick
    return tuple(out)


def _branch_group(p: Misocp, res: SolveResult, assignment, tol: float) -> int:
    """Most fractional unrepairable group: largest min_i z, ties by lowest index."""
    best, best_score = None, -math.inf
    for gi, member in enumerate(assignment):
        if member is not None:
            continue
        rows = p.groups[gi]
        if any(p.rows[ri].value(res.primal) <= tol for ri in rows):
            continue
        score = float(min(res.relaxed_z[ri] for ri in rows))
        if score > best_score + 1e-12:
            best, best_score = gi, score
    if best is None:
        best = next(gi for gi, m in enumerate(assignment) if m is None)
    return best


def solve(p: Misocp, time_limit: float = 60.0, hint=None, rel_gap: float = 1e-9,
          abs_gap: float = 1e-9, feas_tol: float = FEAS_TOL) -> SolveResult:
    """Best-first branch-and-bound over group assignments.

    ``hint`` is an optional full assignment evaluated first as an incumbent.
    Ties between equal objectives keep the lexicographically smaller
    assignment; the reported assignment is canonicalised at the optimum.
    """
    t0 = time.perf_counter()
    n_groups = len(p.groups)
    nodes = 0
    inc_obj, inc_y, inc_asg = math.inf, None, None
    trace = []

    def offer(obj, y, asg):
        nonlocal inc_obj, inc_y, inc_asg
        if p.max_violation(y, asg) > feas_tol * 10:
            return
        if obj < inc_obj - 1e-12 or (abs(obj - inc_obj) <= 1e-12 and asg < inc_asg):
            inc_obj, inc_y, inc_asg = obj, y, asg
            trace.append((nodes, obj))

    def pruned(bound):
        return bound >= inc_obj - max(abs_gap, rel_gap * abs(inc_obj))

    if n_groups == 0:
        res = solve_convex(p, ())
        res.assignment = () if res.status is SolveStatus.OPTIMAL else None
        res.solve_time = time.perf_counter() - t0
        res.bound = res.objective
        return res

    if hint is not None and len(hint) == n_groups:
        res = solve_convex(p, tuple(hint))
        nodes += 1
        if res.status is SolveStatus.OPTIMAL:
            offer(res.objective, res.primal, tuple(hint))

    heap, seq = [], itertools.count()
    root = (None,) * n_groups
    timed_out = False

    def evaluate(asg, depth):
        nonlocal nodes
        res = solve_convex(p, asg)
        nodes += 1
        if res.status is SolveStatus.INFEASIBLE:
            return
        if res.status is SolveStatus.TIME_LIMIT and res.primal is None:
            return
        if pruned(res.objective):
            return
        if all(m is not None for m in asg):
            offer(res.objective, res.primal, asg)
            return
        full = _repair(p, res.primal, asg, feas_tol)
        if full is not None:
            offer(res.objective, res.primal, full)
            return
        heapq.heappush(heap, (res.objective, -depth, next(seq), asg, res))

    evaluate(root, 0)
    while heap:
        if time.perf_counter() - t0 > time_limit:
            timed_out = True
            break
        bound, neg_depth, _, asg, res = heapq.heappop(heap)
        if pruned(bound):
            continue
        gi = _branch_group(p, res, asg, feas_tol)
        for m in range(len(p.groups[gi])):
            child = asg[:gi] + (m,) + asg[gi + 1:]
            evaluate(child, -neg_depth + 1)
    best_bound = min([inc_obj] + [h[0] for h in heap]) if timed_out else inc_obj
    elapsed = time.perf_counter() - t0
    if inc_y is None:
        status = SolveStatus.TIME_LIMIT if timed_out else SolveStatus.INFEASIBLE
        return SolveResult(status, math.inf, None, None, nodes, elapsed, bound=best_bound)
    canon = p.canonical_assignment(inc_y, feas_tol) or inc_asg
    status = SolveStatus.TIME_LIMIT if timed_out else SolveStatus.OPTIMAL
    return SolveResult(status, inc_obj, inc_y, canon, nodes, elapsed, incumbent_trace=trace, bound=best_bound)


def solve_by_enumeration(p: Misocp, feas_tol: float = FEAS_TOL) -> SolveResult:
    """Exhaustive oracle: solve every full assignment, keep the best."""
    t0 = time.perf_counter()
    best = (math.inf, None, None)
    count = 0
    for asg in itertools.product(*[range(len(g)) for g in p.groups]):
        res = solve_convex(p, asg)
        count += 1
        if res.status is not SolveStatus.OPTIMAL:
            continue
        if res.objective < best[0] - 1e-12 or (abs(res.objective - best[0]) <= 1e-12 and asg < best[2]):
            best = (res.objective, res.primal, asg)
    elapsed = time.perf_counter() - t0
    if best[1] is None:
        return SolveResult(SolveStatus.INFEASIBLE, math.inf, None, None, count, elapsed)
    canon = p.canonical_assignment(best[1], feas_tol) or best[2]
    return SolveResult(SolveStatus.OPTIMAL, best[0], best[1], canon, count, elapsed, bound=best[0])


# ---------------------------------------------------------------------------
# dump / restore

FORMAT_TAG = "ccmpc-misocp/1"


def _triplets(mat) -> dict:
    coo = sparse.coo_matrix(mat)
    return {"shape": list(coo.shape), "row": coo.row.tolist(), "col": coo.col.tolist(),
            "val": coo.data.tolist()}


def _from_triplets(d) -> sparse.csc_matrix:
    return sparse.csc_matrix((d["val"], (d["row"], d["col"])), shape=tuple(d["shape"]))


def problem_to_dict(p: Misocp) -> dict:
    return {
        "format": FORMAT_TAG,
        "n": p.n,
        "P": _triplets(p.P),
        "q": p.q.tolist(),
        "r": p.r,
        "A_eq": _triplets(p.A_eq),
        "b_eq": p.b_eq.tolist(),
        "G": _triplets(p.G),
        "h": p.h.tolist(),
        "rows": [{"terms": [{"F": np.asarray(f).tolist(), "g": np.asarray(g).tolist()} for f, g in row.terms],
                  "a": row.a.tolist(), "c": row.c, "big_m": row.big_m, "tag": list(row.tag)}
                 for row in p.rows],
        "groups": [list(g) for g in p.groups],
    }


def problem_from_dict(d: dict) -> Misocp:
    if d.get("format") != FORMAT_TAG:
        raise ProblemFormatError(f"expected format {FORMAT_TAG!r}, got {d.get('format')!r}")
    try:
        n = int(d["n"])
        rows = []
        for r in d["rows"]:
            terms = tuple((np.array(t["F"], dtype=float).reshape(-1, n), np.array(t["g"], dtype=float))
                          for t in r["terms"])
            rows.append(ConeRow(terms, np.array(r["a"], dtype=float), float(r["c"]), float(r["big_m"]),
                                tuple(r.get("tag", ()))))
        return Misocp(n, _from_triplets(d["P"]), np.array(d["q"], dtype=float), float(d.get("r", 0.0)),
                      _from_triplets(d["A_eq"]), np.array(d["b_eq"], dtype=float),
                      _from_triplets(d["G"]), np.array(d["h"], dtype=float), rows,
                      [list(map(int, g)) for g in d["groups"]])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ProblemFormatError):
            raise
        raise ProblemFormatError(f"malformed problem file: {exc}") from None


def save_problem(p: Misocp, path):
    with open(path, "w") as fh:
        json.dump(problem_to_dict(p), fh, indent=1)


def load_problem(path) -> Misocp:
    with open(path) as fh:
        return problem_from_dict(json.load(fh))
