"""Nested evolutionary bilevel solvers and the adaptive mapping-based BLEAQ-II.

All four algorithms share one run state: the problem, evaluation counter,
random generator, Tag-1 archive and two logs of every truly evaluated point
(upper level: F and G; lower level: f and g). The logs feed the quadratic
and affine surrogates used by the auxiliary problem and the local search.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (
    FEAS_TOL,
    Archive,
    BilevelProblem,
    EvalCounter,
    Individual,
    Level,
    Tag,
    UsageError,
    charge_lower,
    charge_upper,
    deb_key,
    violation,
)
from .metamodel import (
    InsufficientDataError,
    LinearModel,
    PhiModel,
    PsiModel,
    QuadraticModel,
    fit_linear,
    fit_phi,
    fit_psi,
    fit_quadratic,
    quadratic_basis_size,
)
from .solvers import (
    BLEAQ2_PARAMS,
    LOWER_EA_PARAMS,
    NESTED_PARAMS,
    EaParams,
    LocalSolveReport,
    local_solve,
    lower_level_ea,
    make_offspring,
    replace_from_pool,
    select_parents,
    variance_termination,
)


class Mode(enum.Enum):
    PLAIN = "plain"
    PSI = "psi"
    PHI = "phi"
    ADAPTIVE = "adaptive"


class Termination(enum.Enum):
    ACCURACY = "accuracy"
    VARIANCE = "variance"
    BUDGET = "budget"
    GENERATIONS = "generations"
    ABORT = "abort"


# trust-region scale below which the local search starts over at full size
RADIUS_FLOOR = 1e-3


class LowerStart(enum.Enum):
    CORNER = "corner"  # lower-bound vertex of the lower-level box
    RANDOM = "random"
    ARCHIVE = "archive"  # x_l of the nearest archived Tag-1 member


@dataclass(frozen=True)
class BleaqConfig:
    ea: EaParams = BLEAQ2_PARAMS
    lower_ea: EaParams = LOWER_EA_PARAMS
    local_search_every_k: int = 5
    neighborhood_factor: int = 2  # neighbourhood = factor * quadratic basis size
    neighborhood_size: Optional[int] = None
    accuracy_target: float = 1e-2
    max_ll_calls: int = 200_000
    ll_tol: float = 1e-6
    ll_max_iter: int = 200
    init_retries: int = 3
    ll_start: LowerStart = LowerStart.CORNER  # where lower-level solves without a prediction begin
    failure_marker: str = "-"

    def __post_init__(self):
        if self.local_search_every_k < 1:
            raise UsageError("local_search_every_k must be >= 1")
        if self.accuracy_target <= 0 or self.max_ll_calls <= 0:
            raise UsageError("accuracy and budget must be positive")
        if self.neighborhood_factor < 1:
            raise UsageError("neighborhood_factor must be >= 1")

    def neighbors_for(self, n: int) -> int:
        basis = quadratic_basis_size(n)
        size = self.neighborhood_size or self.neighborhood_factor * basis
        if size < basis:
            raise UsageError(f"neighborhood_size {size} is below the quadratic basis size {basis}")
        return size

    @classmethod
    def nested(cls, **overrides) -> "BleaqConfig":
        return cls(ea=overrides.pop("ea", NESTED_PARAMS), **overrides)


@dataclass
class TraceEntry:
    gen: int
    best_F: float
    ul_evals: int
    ll_evals: int
    e_mse_psi: Optional[float] = None
    e_mse_phi: Optional[float] = None
    chosen_mapping: Optional[str] = None
    psi_error: Optional[float] = None
    phi_error: Optional[float] = None


@dataclass
class Decision:
    gen: int
    mapping: str  # "psi" or "phi"
    e_mse_psi: float
    e_mse_phi: float


@dataclass
class RunRecord:
    algorithm: str
    problem: str
    seed: Optional[int]
    best: Individual
    counter: EvalCounter
    terminated_by: Termination
    success: bool
    generations: int
    trace: list[TraceEntry] = field(default_factory=list)
    decisions: list[Decision] = field(default_factory=list)
    message: str = ""

    def mapping_share(self, mapping: str) -> float:
        if not self.decisions:
            return float("nan")
        return sum(d.mapping == mapping for d in self.decisions) / len(self.decisions)


class RunAborted(RuntimeError):
    """No feasible starting point could be produced."""


# ---------------------------------------------------------------- sample logs


class SampleLog:
    """Append-only store of truly evaluated points ``(x_u, x_l) -> (value, constraints)``."""

    def __init__(self, dim: int, n_cons: int, capacity: int = 1024):
        self.dim = dim
        self.n_cons = n_cons
        self._X = np.empty((capacity, dim))
        self._y = np.empty(capacity)
        self._C = np.empty((capacity, n_cons))
        self.size = 0

    def _grow(self, extra: int) -> None:
        need = self.size + extra
        if need <= self._X.shape[0]:
            return
        cap = max(need, 2 * self._X.shape[0])
        for name in ("_X", "_y", "_C"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:])
            new[: self.size] = old[: self.size]
            setattr(self, name, new)

    def add(self, z, value: float, cons) -> None:
        self.add_many(np.atleast_2d(z), np.atleast_1d(value), np.reshape(cons, (1, self.n_cons)))

    def add_many(self, Z, values, cons) -> None:
        Z = np.asarray(Z, dtype=float)
        values = np.asarray(values, dtype=float)
        cons = np.asarray(cons, dtype=float).reshape(values.size, self.n_cons)
        keep = np.isfinite(values)
        Z, values, cons = Z[keep], values[keep], cons[keep]
        k = Z.shape[0]
        self._grow(k)
        self._X[self.size : self.size + k] = Z
        self._y[self.size : self.size + k] = values
        self._C[self.size : self.size + k] = cons
        self.size += k

    def nearest(self, query, count: int, scale) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        X = self._X[: self.size]
        d = np.sum(((X - query) / scale) ** 2, axis=1)
        count = min(count, self.size)
        idx = np.argpartition(d, count - 1)[:count] if count < self.size else np.arange(self.size)
        return X[idx], self._y[idx], self._C[idx]


@dataclass(frozen=True)
class Surrogates:
    """Local models of F, G (upper) and f, g (lower) over the joint vector (x_u, x_l)."""

    n: int
    F: QuadraticModel
    G: tuple[LinearModel, ...]
    f: QuadraticModel
    g: tuple[LinearModel, ...]
    box: np.ndarray  # joint trust region, shape (n + m, 2)

    def upper(self, z) -> tuple[float, np.ndarray]:
        return self.F.predict(z), np.array([m.predict(z) for m in self.G])

    def lower(self, z) -> tuple[float, np.ndarray]:
        return self.f.predict(z), np.array([m.predict(z) for m in self.g])


def _fit_block(X, y, C) -> tuple[QuadraticModel, tuple[LinearModel, ...]]:
    return fit_quadratic(X, y), tuple(fit_linear(X, C[:, k]) for k in range(C.shape[1]))


# ---------------------------------------------------------------- run state


class RunState:
    """Everything one run mutates: counter, generator, archive and sample logs."""

    def __init__(self, problem: BilevelProblem, config: BleaqConfig, counter: EvalCounter,
                 rng: np.random.Generator):
        self.problem = problem
        self.config = config
        self.counter = counter
        self.rng = rng
        self.archive = Archive()
        dim = problem.n + problem.m
        self.upper_log = SampleLog(dim, problem.K)
        self.lower_log = SampleLog(dim, problem.J)
        self.joint_box = np.vstack([problem.upper_bounds, problem.lower_bounds])
        width = self.joint_box[:, 1] - self.joint_box[:, 0]
        self.joint_scale = np.where(width > 0, width, 1.0)
        self.exact_next = False
        self.ls_radius = 1.0  # trust-region scale of the improvement search
        self.generation = 0

    # ---- budget

    def budget_left(self) -> bool:
        return self.counter.ll_evals < self.config.max_ll_calls

    # ---- true evaluations

    def random_upper(self) -> np.ndarray:
        b = self.problem.upper_bounds
        return b[:, 0] + self.rng.random(self.problem.n) * (b[:, 1] - b[:, 0])

    def random_lower(self) -> np.ndarray:
        b = self.problem.lower_bounds
        return b[:, 0] + self.rng.random(self.problem.m) * (b[:, 1] - b[:, 0])

    def evaluate_upper_member(self, ind: Individual) -> Individual:
        F_val, G_vals = charge_upper(self.problem, ind.x_u, ind.x_l, self.counter)
        self.upper_log.add(np.concatenate([ind.x_u, ind.x_l]), F_val, G_vals)
        ind.F_val, ind.ul_violation = F_val, violation(G_vals)
        return ind

    def solve_lower(self, x_u, start=None) -> tuple[np.ndarray, float, float, bool]:
        """True lower-level optimization at ``x_u``; returns (x_l, f, violation, success)."""
        p = self.problem
        x_u = np.asarray(x_u, dtype=float)
        if not p.ll_convex:
            rep = lower_level_ea(p, x_u, self.config.lower_ea, self.counter, self.rng, seeds=start)
            self.lower_log.add_many(
                np.hstack([np.tile(x_u, (rep.samples[0].shape[0], 1)), rep.samples[0]]),
                rep.samples[1], rep.samples[2])
            # polish the evolutionary result with the local solver
            polished = self._local_lower(x_u, rep.x_opt)
            if fitness_key_raw(polished) <= fitness_key_raw(rep):
                rep = polished
            if start is not None:
                # a predicted x_l that proves lower-level optimal is kept: among
                # equally good lower-level optima it is the one the search chose
                own = self._local_lower(x_u, start)
                if own.violation <= FEAS_TOL and own.f_opt <= rep.f_opt + self.config.ll_tol * (1.0 + abs(rep.f_opt)):
                    rep = own
            return rep.x_opt, rep.f_opt, rep.violation, rep.violation <= FEAS_TOL

        starts = [self.lower_start(x_u) if start is None else np.asarray(start, dtype=float)]
        starts += [self.random_lower() for _ in range(p.ll_starts - 1)]
        best: Optional[LocalSolveReport] = None
        for x0 in starts:
            rep = self._local_lower(x_u, x0)
            if best is None or fitness_key_raw(rep) < fitness_key_raw(best):
                best = rep
        return best.x_opt, best.f_opt, best.violation, best.converged

    def _local_lower(self, x_u, x0) -> LocalSolveReport:
        p = self.problem
        cons = (lambda y: np.array([c(x_u, y) for c in p.g], dtype=float)) if p.J else None
        counter = self.counter

        def charge():
            counter.ll_evals += 1

        rep = local_solve(lambda y: p.f(x_u, y), cons, p.lower_bounds, x0, charge=charge,
                          tol=self.config.ll_tol, max_iter=self.config.ll_max_iter, keep_samples=True)
        if rep.samples is not None:
            X, y, C = rep.samples
            self.lower_log.add_many(np.hstack([np.tile(x_u, (X.shape[0], 1)), X]), y, C.reshape(len(y), p.J))
        return rep

    def shrink_radius(self) -> None:
        """Halve the local-search trust region; restart it once it has collapsed."""
        self.ls_radius *= 0.5
        if self.ls_radius < RADIUS_FLOOR:
            self.ls_radius = 1.0

    def lower_start(self, x_u) -> np.ndarray:
        """Start point for a lower-level solve that has no predicted x_l to begin from."""
        policy = self.config.ll_start
        if policy is LowerStart.ARCHIVE:
            near = self.archive.nearest(x_u, 1)
            if near:
                return near[0].x_l.copy()
        if policy is LowerStart.CORNER:
            return self.problem.lower_bounds[:, 0].copy()
        return self.random_lower()

    def make_member(self, x_u, start=None, archive: bool = True) -> Individual:
        """Solve the lower level at ``x_u``, evaluate the upper level and tag."""
        x_l, f_val, ll_viol, ok = self.solve_lower(x_u, start)
        ind = Individual(np.asarray(x_u, dtype=float).copy(), x_l, f_val=f_val, ll_violation=ll_viol,
                         tag=Tag.TAG1 if ok else Tag.TAG0)
        self.evaluate_upper_member(ind)
        if ok and archive:
            self.archive.add(ind)
        return ind

    # ---- surrogates

    def neighbors(self, x_u) -> list[Individual]:
        size = self.config.neighbors_for(self.problem.n)
        return self.archive.nearest(x_u, min(size, len(self.archive)))

    def fit_mappings(self, x_u) -> tuple[PsiModel, PhiModel, list[Individual]]:
        nbrs = self.neighbors(x_u)
        return fit_psi(nbrs), fit_phi(nbrs), nbrs

    def fit_surrogates(self, x_u, x_l) -> Optional[Surrogates]:
        dim = self.problem.n + self.problem.m
        basis = quadratic_basis_size(dim)
        count = self.config.neighborhood_factor * basis
        if self.upper_log.size < basis or self.lower_log.size < basis:
            return None
        q = np.concatenate([x_u, x_l])
        XU, yU, CU = self.upper_log.nearest(q, count, self.joint_scale)
        XL, yL, CL = self.lower_log.nearest(q, count, self.joint_scale)
        try:
            F_hat, G_hat = _fit_block(XU, yU, CU)
            f_hat, g_hat = _fit_block(XL, yL, CL)
        except InsufficientDataError:
            return None
        data = np.vstack([XU, XL, q[None, :]])
        box = np.column_stack([data.min(axis=0), data.max(axis=0)])
        box[:, 0] = np.maximum(box[:, 0], self.joint_box[:, 0])
        box[:, 1] = np.minimum(box[:, 1], self.joint_box[:, 1])
        return Surrogates(self.problem.n, F_hat, G_hat, f_hat, g_hat, box)


def rank_key(ind: Individual) -> tuple[int, float]:
    """Upper-level ranking used by the population.

    The feasibility-first rule on F and the upper constraints, except that a
    member whose lower-level solve found no feasible point also carries that
    lower-level violation: such a pair is infeasible for the bilevel problem.
    Predicted (Tag-0) members have no lower-level violation on record.
    """
    ll = ind.ll_violation if np.isfinite(ind.ll_violation) else 0.0
    return deb_key(ind.F_val, ind.ul_violation + (ll if ll > FEAS_TOL else 0.0))


def fitness_key_raw(rep: LocalSolveReport) -> tuple[int, float]:
    return (0, rep.f_opt) if rep.violation <= FEAS_TOL else (1, rep.violation)


# ---------------------------------------------------------------- initialization


def _feasibility_point(state: RunState) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """A pair satisfying every G and g: minimize 0 subject to all constraints."""
    p = state.problem
    n = p.n
    box = state.joint_box
    counter = state.counter

    def cons(z):
        x_u, x_l = z[:n], z[n:]
        return np.concatenate([p.upper_values(x_u, x_l)[1], p.lower_values(x_u, x_l)[1]])

    def charge():
        counter.ul_evals += 1
        counter.ll_evals += 1

    z0 = np.concatenate([state.random_upper(), state.random_lower()])
    if p.K + p.J == 0:
        return z0[:n], z0[n:]
    rep = local_solve(lambda z: 0.0, cons, box, z0, charge=charge, tol=state.config.ll_tol,
                      max_iter=state.config.ll_max_iter)
    if rep.violation <= FEAS_TOL:
        return rep.x_opt[:n], rep.x_opt[n:]
    return None


def initialize_population(problem: BilevelProblem, size: int, state: RunState) -> list[Individual]:
    """Random upper-level members with solved lower levels, Tag-1 ones archived.

    Each member keeps the best of up to ``1 + init_retries`` random draws
    (retries sample around the feasible members found so far); a
    member whose lower level is still unsolvable takes its upper-level vector
    from the feasibility problem (all constraints, constant objective) started
    at a random point. If no member ends up feasible at both levels, further
    feasibility solves seed one in place of the worst member.
    """
    population = []
    for _ in range(size):
        ind = None
        feasible_u = [m.x_u for m in population if m.tag is Tag.TAG1 and m.feasible]
        for attempt in range(state.config.init_retries + 1):
            x_u = state.random_upper()
            if attempt and feasible_u:
                # retry near the feasible members found so far
                F = np.array(feasible_u)
                near = _widen(np.column_stack([F.min(axis=0), F.max(axis=0)]), problem.upper_bounds)
                x_u = near[:, 0] + state.rng.random(problem.n) * (near[:, 1] - near[:, 0])
            cand = state.make_member(x_u, archive=False)
            if ind is None or _init_better(cand, ind):
                ind = cand
            if cand.tag is Tag.TAG1 and cand.feasible:
                break
        if ind.tag is not Tag.TAG1:
            pair = _feasibility_point(state)
            if pair is not None:
                cand = state.make_member(pair[0], archive=False)
                if _init_better(cand, ind):
                    ind = cand
        if ind.tag is Tag.TAG1:
            state.archive.add(ind)
        population.append(ind)

    if not any(ind.tag is Tag.TAG1 and ind.feasible for ind in population):
        for _ in range(state.config.init_retries + 1):
            pair = _feasibility_point(state)
            if pair is None:
                continue
            cand = state.make_member(pair[0])
            if cand.tag is Tag.TAG1:
                worst = max(range(size), key=lambda i: (population[i].tag is not Tag.TAG1, rank_key(population[i])))
                population[worst] = cand
                if cand.feasible:
                    break
    if not any(ind.tag is Tag.TAG1 for ind in population):
        raise RunAborted(f"{problem.name}: no member with a solvable lower level")
    return population


def _init_better(a: Individual, b: Individual) -> bool:
    ka = (a.tag is not Tag.TAG1, rank_key(a))
    kb = (b.tag is not Tag.TAG1, rank_key(b))
    return ka < kb


# ---------------------------------------------------------------- surrogate subproblems


def auxiliary_solve(x_u, phi_model: PhiModel, surrogates: Surrogates, bounds, x0,
                    phi_slack: float = 0.0) -> Optional[np.ndarray]:
    """Lower-level vector minimizing F-hat subject to f-hat <= phi-hat and the
    approximated constraints, with ``x_u`` fixed. Surrogates only; no counter.

    Returns ``None`` when the surrogate problem stays infeasible after relaxing
    the value-function constraint once by the square root of its training MSE.
    """
    x_u = np.asarray(x_u, dtype=float)
    box = np.asarray(bounds, dtype=float)
    phi_val = phi_model.predict(x_u)

    def z_of(x_l):
        return np.concatenate([x_u, x_l])

    def solve(slack):
        def cons(x_l):
            z = z_of(x_l)
            F_part = surrogates.upper(z)[1]
            f_val, g_vals = surrogates.lower(z)
            return np.concatenate([[f_val - phi_val - slack], g_vals, F_part])

        return local_solve(lambda x_l: surrogates.F.predict(z_of(x_l)), cons, box, x0)

    for slack in (phi_slack, phi_slack + np.sqrt(max(phi_model.mse, 0.0))):
        rep = solve(slack)
        if rep.violation <= FEAS_TOL:
            return rep.x_opt
    return None


def _mapping_choice(psi: PsiModel, phi: PhiModel) -> str:
    return "psi" if psi.mse <= phi.mse else "phi"


def bleaq2_offspring_update(x_u, population: list[Individual], state: RunState,
                            decisions: list[Decision]) -> Individual:
    """Step 3: exact lower-level solve while Tag-1 members are scarce, otherwise a
    Tag-0 lower-level vector from the better-fitting local mapping."""
    p = state.problem
    n_tag1 = sum(ind.tag is Tag.TAG1 for ind in population)
    if 2 * n_tag1 >= len(population):
        try:
            psi, phi, nbrs = state.fit_mappings(x_u)
        except InsufficientDataError:
            psi = phi = None
        if psi is not None:
            choice = _mapping_choice(psi, phi)
            # no extrapolation beyond the lower-level values seen in the neighbourhood
            X_l = np.array([ind.x_l for ind in nbrs])
            x_psi = np.clip(psi.predict(x_u), X_l.min(axis=0), X_l.max(axis=0))
            x_l = x_psi if choice == "psi" else None
            if choice == "phi":
                sur = state.fit_surrogates(x_u, x_psi)
                if sur is not None:
                    x_l = auxiliary_solve(x_u, phi, sur, sur.box[p.n:], x_psi)
                    if x_l is None:
                        x_l = x_psi
            if x_l is not None:
                decisions.append(Decision(state.generation, choice, psi.mse, phi.mse))
                ind = Individual(np.asarray(x_u, dtype=float).copy(), p.clip_lower(x_l), tag=Tag.TAG0)
                return state.evaluate_upper_member(ind)
    return state.make_member(x_u, start=None)


# ---------------------------------------------------------------- local search


@dataclass
class LocalSearchOutcome:
    candidate: Optional[Individual]
    improved: bool
    mapping: Optional[str]
    e_mse_psi: Optional[float] = None
    e_mse_phi: Optional[float] = None
    psi_error: Optional[float] = None
    phi_error: Optional[float] = None


def _psi_reduction(state: RunState, psi: PsiModel, sur: Optional[Surrogates], box_u, x0, exact: bool):
    """Minimize F(x_u, q_psi(x_u)) subject to G and g at the predicted pair."""
    p = state.problem
    lo, hi = p.lower_bounds[:, 0], p.lower_bounds[:, 1]

    def pair(x_u):
        return x_u, np.clip(psi.predict(x_u), lo, hi)

    if exact:
        counter = state.counter
        cache = {}

        def values(x_u):
            key = x_u.tobytes()
            if key not in cache:
                xu, xl = pair(x_u)
                z = np.concatenate([xu, xl])
                F_val, G_vals = p.upper_values(xu, xl)
                state.upper_log.add(z, F_val, G_vals)
                g_vals = np.zeros(0)
                if p.J:
                    f_val, g_vals = p.lower_values(xu, xl)
                    state.lower_log.add(z, f_val, g_vals)
                cache[key] = (F_val, np.concatenate([G_vals, g_vals]))
            return cache[key]

        def charge():
            counter.ul_evals += 1
            if p.J:
                counter.ll_evals += 1
    else:
        charge = None

        def values(x_u):
            z = np.concatenate(pair(x_u))
            F_val, G_vals = sur.upper(z)
            return F_val, np.concatenate([G_vals, sur.lower(z)[1]])

    cons = (lambda x: values(x)[1]) if p.K + p.J else None
    rep = local_solve(lambda x: values(x)[0], cons, box_u, x0, charge=charge)
    return rep.x_opt, pair(rep.x_opt)[1], rep.violation <= FEAS_TOL


def _phi_reduction(state: RunState, phi: PhiModel, sur: Optional[Surrogates], box, z0, exact: bool):
    p = state.problem
    n = p.n

    if exact:
        counter = state.counter
        cache = {}

        def values(z):
            key = z.tobytes()
            if key not in cache:
                xu, xl = z[:n], z[n:]
                F_val, G_vals = p.upper_values(xu, xl)
                f_val, g_vals = p.lower_values(xu, xl)
                state.upper_log.add(z, F_val, G_vals)
                state.lower_log.add(z, f_val, g_vals)
                cache[key] = (F_val, G_vals, f_val, g_vals)
            return cache[key]

        def charge():
            counter.ul_evals += 1
            counter.ll_evals += 1
    else:
        charge = None

        def values(z):
            F_val, G_vals = sur.upper(z)
            f_val, g_vals = sur.lower(z)
            return F_val, G_vals, f_val, g_vals

    def cons(z):
        _, G_vals, f_val, g_vals = values(z)
        return np.concatenate([[f_val - phi.predict(z[:n])], g_vals, G_vals])

    rep = local_solve(lambda z: values(z)[0], cons, box, z0, charge=charge)
    return rep.x_opt[:n], rep.x_opt[n:], rep.violation <= FEAS_TOL


def _widen(box, bounds, grow: float = 0.5, min_frac: float = 0.01) -> np.ndarray:
    """Extend ``box`` by ``grow`` times its width on each side, with a floor of
    ``min_frac`` of the variable range, then intersect with ``bounds``."""
    width = box[:, 1] - box[:, 0]
    pad = np.maximum(grow * width, min_frac * (bounds[:, 1] - bounds[:, 0]))
    return np.column_stack([np.maximum(box[:, 0] - pad, bounds[:, 0]),
                            np.minimum(box[:, 1] + pad, bounds[:, 1])])


def _shrink(box, center, scale: float) -> np.ndarray:
    """Scale the distances from ``center`` to each face of ``box`` by ``scale``."""
    if scale >= 1.0:
        return box
    return np.column_stack([center - scale * (center - box[:, 0]), center + scale * (box[:, 1] - center)])


def improvement_local_search(best: Individual, state: RunState, force: Optional[str] = None) -> LocalSearchOutcome:
    """Surrogate single-level reduction around ``best`` followed by a true
    lower-level solve at the proposed upper-level point.

    ``force`` pins the mapping ("psi" or "phi"); otherwise the one with the
    lower training error is used. After a non-improving search the next one
    evaluates the true functions instead of the surrogates.
    """
    p = state.problem
    try:
        psi, phi, nbrs = state.fit_mappings(best.x_u)
    except InsufficientDataError:
        return LocalSearchOutcome(None, False, None)
    choice = force or _mapping_choice(psi, phi)
    exact = state.exact_next
    sur = state.fit_surrogates(best.x_u, best.x_l)
    if sur is None and not exact:
        state.exact_next = True
        return LocalSearchOutcome(None, False, choice, psi.mse, phi.mse)

    # trust region: neighbourhood extent (at least the surrogate data box), widened
    X_nb = np.array([ind.x_u for ind in nbrs])
    box_u = np.column_stack([X_nb.min(axis=0), X_nb.max(axis=0)])
    if sur is not None:
        box_u = np.column_stack([np.minimum(box_u[:, 0], sur.box[: p.n, 0]),
                                 np.maximum(box_u[:, 1], sur.box[: p.n, 1])])
    box_l = sur.box[p.n:] if sur is not None else p.lower_bounds
    box_l = np.column_stack([np.minimum(box_l[:, 0], best.x_l), np.maximum(box_l[:, 1], best.x_l)])
    box_u = _shrink(_widen(box_u, p.upper_bounds), best.x_u, state.ls_radius)
    # exact functions hold everywhere, so only x_u (through the fitted mapping) stays local
    box_l = p.lower_bounds if exact else _widen(box_l, p.lower_bounds)

    if choice == "psi":
        x_u, x_l_pred, ok = _psi_reduction(state, psi, sur, box_u, best.x_u, exact)
    else:
        x_u, x_l_pred, ok = _phi_reduction(state, phi, sur, np.vstack([box_u, box_l]),
                                           np.concatenate([best.x_u, best.x_l]), exact)
    if not ok:
        state.exact_next = True
        state.shrink_radius()
        return LocalSearchOutcome(None, False, choice, psi.mse, phi.mse)

    # the phi reduction chose x_l itself, so the true solve checks it; a psi
    # prediction is only an estimate of the reaction and is not reused
    cand = state.make_member(x_u, start=x_l_pred if choice == "phi" else None)
    out = LocalSearchOutcome(cand, False, choice, psi.mse, phi.mse)
    if cand.tag is Tag.TAG1:
        out.psi_error = float(np.linalg.norm(p.clip_lower(psi.predict(x_u)) - cand.x_l))
        if sur is not None:
            x_phi = auxiliary_solve(x_u, phi, sur, box_l, p.clip_lower(psi.predict(x_u)))
            if x_phi is not None:
                out.phi_error = float(np.linalg.norm(x_phi - cand.x_l))
        out.improved = rank_key(cand) < rank_key(best)
    state.exact_next = not out.improved
    if out.improved:
        state.ls_radius = min(1.0, 2.0 * state.ls_radius)
    else:
        state.shrink_radius()
    return out


# ---------------------------------------------------------------- drivers


def _best_tag1(population: list[Individual]) -> Optional[Individual]:
    tagged = [ind for ind in population if ind.tag is Tag.TAG1]
    if not tagged:
        return None
    return min(tagged, key=rank_key)


def _accurate(ind: Optional[Individual], problem: BilevelProblem, eps: float) -> bool:
    opt = problem.known_optimum
    if ind is None or opt is None or not ind.feasible:
        return False
    return abs(ind.F_val - opt.F_star) <= eps and abs(ind.f_val - opt.f_star) <= eps


def _evolve(problem: BilevelProblem, config: BleaqConfig, counter: EvalCounter,
            rng: np.random.Generator, mode: Mode, algorithm: str, seed=None) -> RunRecord:
    state = RunState(problem, config, counter, rng)
    ea = config.ea
    eps = config.accuracy_target
    trace: list[TraceEntry] = []
    decisions: list[Decision] = []

    try:
        population = initialize_population(problem, ea.pop_size, state)
    except RunAborted as exc:
        dummy = Individual(state.random_upper(), state.random_lower())
        return RunRecord(algorithm, problem.name, seed, dummy, counter, Termination.ABORT, False, 0,
                         message=str(exc))

    # variance reference: the feasible part of the initial population when it has spread
    X0 = np.array([ind.x_u for ind in population if ind.tag is Tag.TAG1 and ind.feasible])
    if X0.shape[0] < 2 or not np.any(X0.var(axis=0) > 0):
        X0 = np.array([ind.x_u for ind in population])
    ub = problem.upper_bounds
    terminated = None
    if _accurate(_best_tag1(population), problem, eps):
        terminated = Termination.ACCURACY

    gen = 0
    while terminated is None:
        gen += 1
        state.generation = gen
        gen_decisions_start = len(decisions)
        keys = [rank_key(ind) for ind in population]

        # reproduction on upper-level variables
        par = select_parents(keys, ea, rng)
        P = np.array([population[i].x_u for i in par])
        kids_x = [make_offspring(P, [keys[i] for i in par], ub, ea, rng) for _ in range(ea.offspring_lambda)]

        if mode is Mode.ADAPTIVE:
            kids = [bleaq2_offspring_update(x, population, state, decisions) for x in kids_x]
            # a prediction that claims a new population best is verified by a true solve
            top = min(keys)
            for j, kid in enumerate(kids):
                if kid.tag is Tag.TAG0 and rank_key(kid) < top:
                    kids[j] = state.make_member(kid.x_u, start=kid.x_l)
        else:
            kids = [state.make_member(x, start=None) for x in kids_x]

        for slot, src in replace_from_pool(keys, [rank_key(k) for k in kids], ea.replace_r, rng):
            if src < 0:
                population[slot] = kids[-src - 1]
            elif src != slot:
                population[slot] = population[src]

        entry = TraceEntry(gen, float(population[min(range(len(population)), key=lambda i: rank_key(population[i]))].F_val),
                           counter.ul_evals, counter.ll_evals)
        gen_dec = decisions[gen_decisions_start:]
        if gen_dec:
            entry.e_mse_psi = gen_dec[-1].e_mse_psi
            entry.e_mse_phi = gen_dec[-1].e_mse_phi
            n_psi = sum(d.mapping == "psi" for d in gen_dec)
            entry.chosen_mapping = "psi" if 2 * n_psi >= len(gen_dec) else "phi"

        # periodic improvement step on the best Tag-1 member
        if mode is not Mode.PLAIN and gen % config.local_search_every_k == 0:
            best = _best_tag1(population)
            if best is not None:
                force = {Mode.PSI: "psi", Mode.PHI: "phi"}.get(mode)
                out = improvement_local_search(best, state, force)
                if out.mapping is not None:
                    entry.e_mse_psi = out.e_mse_psi if entry.e_mse_psi is None else entry.e_mse_psi
                    entry.e_mse_phi = out.e_mse_phi if entry.e_mse_phi is None else entry.e_mse_phi
                    entry.psi_error, entry.phi_error = out.psi_error, out.phi_error
                    if entry.chosen_mapping is None:
                        entry.chosen_mapping = out.mapping
                if out.improved:
                    idx = next(i for i, ind in enumerate(population) if ind is best)
                    population[idx] = out.candidate
                entry.best_F = float(population[min(range(len(population)),
                                                    key=lambda i: rank_key(population[i]))].F_val)
        trace.append(entry)

        if _accurate(_best_tag1(population), problem, eps):
            terminated = Termination.ACCURACY
        elif not state.budget_left():
            terminated = Termination.BUDGET
        elif variance_termination(X0, [ind.x_u for ind in population], ea.alpha_stop)[1]:
            terminated = Termination.VARIANCE
        elif gen >= ea.max_gens:
            terminated = Termination.GENERATIONS

    best = _best_tag1(population) or population[min(range(len(population)), key=lambda i: rank_key(population[i]))]
    success = _accurate(best, problem, eps) and counter.ll_evals <= config.max_ll_calls
    return RunRecord(algorithm, problem.name, seed, best, counter, terminated, success, gen, trace, decisions)


_NESTED_NAMES = {Mode.PLAIN: "nested", Mode.PSI: "psi", Mode.PHI: "phi"}


def nested_solve(problem: BilevelProblem, config: Optional[BleaqConfig] = None,
                 counter: Optional[EvalCounter] = None, rng: Optional[np.random.Generator] = None,
                 mode: Mode = Mode.PLAIN, seed: Optional[int] = None) -> RunRecord:
    """Nested EA: every offspring's lower level is solved exactly. The PSI and
    PHI modes add a periodic local search through a single fitted mapping."""
    if mode is Mode.ADAPTIVE:
        raise UsageError("nested_solve takes PLAIN, PSI or PHI")
    config = config or BleaqConfig.nested()
    counter = counter if counter is not None else EvalCounter()
    rng = rng if rng is not None else np.random.default_rng(seed)
    return _evolve(problem, config, counter, rng, mode, _NESTED_NAMES[mode], seed)


def bleaq2_solve(problem: BilevelProblem, config: Optional[BleaqConfig] = None,
                 counter: Optional[EvalCounter] = None, rng: Optional[np.random.Generator] = None,
                 seed: Optional[int] = None) -> RunRecord:
    """Adaptive Psi/phi approximation algorithm with archive, auxiliary problem
    and periodic improvement local search."""
    config = config or BleaqConfig()
    counter = counter if counter is not None else EvalCounter()
    rng = rng if rng is not None else np.random.default_rng(seed)
    return _evolve(problem, config, counter, rng, Mode.ADAPTIVE, "bleaq2", seed)


ALGORITHMS: dict[str, Callable[..., RunRecord]] = {
    "nested": lambda problem, config=None, seed=None: nested_solve(problem, config, mode=Mode.PLAIN, seed=seed),
    "psi": lambda problem, config=None, seed=None: nested_solve(problem, config, mode=Mode.PSI, seed=seed),
    "phi": lambda problem, config=None, seed=None: nested_solve(problem, config, mode=Mode.PHI, seed=seed),
    "bleaq2": lambda problem, config=None, seed=None: bleaq2_solve(problem, config, seed=seed),
}
