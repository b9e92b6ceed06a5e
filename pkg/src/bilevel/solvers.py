"""Real-coded EA operators, the lower-level EA and a constrained local solver."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .core import (
    FEAS_TOL,
    BilevelProblem,
    EvalCounter,
    Individual,
    Level,
    UsageError,
    charge_lower,
    deb_key,
    fitness_key,
    violation,
)


@dataclass(frozen=True)
class EaParams:
    pop_size: int = 50
    parents_mu: int = 3
    offspring_lambda: int = 2
    replace_r: int = 2
    p_crossover: float = 0.9
    p_mutation: float = 0.1
    mutation_index: float = 20.0
    alpha_stop: float = 1e-4
    max_gens: int = 2000
    pcx_sigma: float = 0.1

    def __post_init__(self):
        if 2 * self.parents_mu > self.pop_size:
            raise UsageError("need 2*mu <= N")
        if self.replace_r > self.pop_size or self.replace_r < 1:
            raise UsageError("need 1 <= r <= N")
        if self.offspring_lambda < 1:
            raise UsageError("need lambda >= 1")
        for p in (self.p_crossover, self.p_mutation):
            if not 0.0 <= p <= 1.0:
                raise UsageError("probabilities must lie in [0, 1]")

    def with_(self, **changes) -> "EaParams":
        return replace(self, **changes)


NESTED_PARAMS = EaParams(pop_size=50, parents_mu=2, offspring_lambda=3, replace_r=2)
BLEAQ2_PARAMS = EaParams(pop_size=50, parents_mu=3, offspring_lambda=2, replace_r=2)
LOWER_EA_PARAMS = EaParams(pop_size=50, parents_mu=3, offspring_lambda=2, replace_r=2, max_gens=1500)


@dataclass
class LocalSolveReport:
    x_opt: np.ndarray
    f_opt: float
    violation: float
    converged: bool
    evals_used: int
    # evaluated points kept for surrogate building: (X, objective, constraint matrix)
    samples: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None
    message: str = ""


# ---------------------------------------------------------------- operators


def pcx_crossover(parents: Sequence, rng: np.random.Generator, index: int = 0, bounds=None,
                  sigma_xi: float = 0.1, sigma_eta: float = 0.1, draws=None) -> np.ndarray:
    """Parent-centric child ``z + w_xi * (z - centroid) + w_eta * (p2 - p1) / 2``.

    ``parents[index]`` is the index parent ``z``; the first two others are
    ``p1`` and ``p2``. The two weights are fresh zero-mean Gaussian draws unless
    ``draws`` fixes them.
    """
    P = np.asarray(parents, dtype=float)
    if P.ndim != 2 or P.shape[0] < 3:
        raise UsageError("PCX needs at least three parents")
    z = P[index]
    others = [i for i in range(P.shape[0]) if i != index]
    p1, p2 = P[others[0]], P[others[1]]
    if draws is None:
        w_xi = rng.normal(0.0, sigma_xi)
        w_eta = rng.normal(0.0, sigma_eta)
    else:
        w_xi, w_eta = draws
    child = z + w_xi * (z - P.mean(axis=0)) + w_eta * (p2 - p1) / 2.0
    if bounds is not None:
        b = np.asarray(bounds, dtype=float)
        child = np.clip(child, b[:, 0], b[:, 1])
    return child


def polynomial_mutation(x, bounds, p_mutation: float, eta_m: float, rng: np.random.Generator) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    x = np.array(x, dtype=float)
    mask = rng.random(x.size) < p_mutation
    if not mask.any():
        return x
    u = rng.random(x.size)
    expo = 1.0 / (eta_m + 1.0)
    delta = np.where(u < 0.5, (2.0 * u) ** expo - 1.0, 1.0 - (2.0 * (1.0 - u)) ** expo)
    x = np.where(mask, x + delta * (b[:, 1] - b[:, 0]), x)
    return np.clip(x, b[:, 0], b[:, 1])


def tournament_select(pool: Sequence[Individual], level: Level = Level.UPPER) -> list[Individual]:
    """Binary tournaments over consecutive pairs of ``pool``."""
    if len(pool) % 2:
        raise UsageError("tournament pool must have even size")
    winners = []
    for a, b in zip(pool[0::2], pool[1::2]):
        winners.append(a if fitness_key(a, level) <= fitness_key(b, level) else b)
    return winners


def variance_termination(initial_pop, current_pop, alpha_stop: float) -> tuple[float, bool]:
    """Ratio of summed per-coordinate variances, current over initial."""
    v0 = float(np.var(np.asarray(initial_pop, dtype=float), axis=0).sum())
    vt = float(np.var(np.asarray(current_pop, dtype=float), axis=0).sum())
    if v0 <= 0.0:
        return 0.0, True
    alpha = vt / v0
    return alpha, alpha < alpha_stop


def make_offspring(parents: np.ndarray, parent_keys: list, bounds: np.ndarray, params: EaParams,
                   rng: np.random.Generator) -> np.ndarray:
    """One child from >= 3 parents: PCX around the best parent, then mutation."""
    index = min(range(len(parent_keys)), key=parent_keys.__getitem__)
    if rng.random() < params.p_crossover:
        child = pcx_crossover(parents, rng, index=index, bounds=bounds,
                              sigma_xi=params.pcx_sigma, sigma_eta=params.pcx_sigma)
    else:
        child = parents[index].copy()
    return polynomial_mutation(child, bounds, params.p_mutation, params.mutation_index, rng)


def select_parents(keys: list, params: EaParams, rng: np.random.Generator) -> list[int]:
    """Tournament winners from 2*mu random members, topped up to three with random members."""
    size = len(keys)
    picks = rng.choice(size, 2 * params.parents_mu, replace=False)
    winners = [a if keys[a] <= keys[b] else b for a, b in zip(picks[0::2], picks[1::2])]
    if len(winners) < 3:
        rest = [i for i in rng.permutation(size) if i not in winners]
        winners += rest[: 3 - len(winners)]
    return [int(i) for i in winners]


def replace_from_pool(keys: list, offspring_keys: list, r: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Pool ``r`` random members with the offspring; the best ``r`` take those slots.

    Returns ``(slot, source)`` pairs where ``source >= 0`` is a population index
    and ``source < 0`` is offspring ``-source - 1``.
    """
    slots = [int(i) for i in rng.choice(len(keys), r, replace=False)]
    pool = [(keys[i], i) for i in slots] + [(k, -j - 1) for j, k in enumerate(offspring_keys)]
    pool.sort(key=lambda t: t[0])
    return list(zip(slots, [src for _, src in pool[:r]]))


# ---------------------------------------------------------------- lower-level EA


def lower_level_ea(problem: BilevelProblem, x_u, params: EaParams, counter: EvalCounter,
                   rng: np.random.Generator, seeds=None) -> LocalSolveReport:
    """Steady-state EA on the lower-level problem for a fixed ``x_u``.

    Rows of ``seeds`` (clipped to the box) replace the first random members.
    """
    x_u = np.asarray(x_u, dtype=float)
    bounds = problem.lower_bounds
    N = params.pop_size
    start = counter.ll_evals
    X = bounds[:, 0] + rng.random((N, problem.m)) * (bounds[:, 1] - bounds[:, 0])
    if seeds is not None:
        S = np.atleast_2d(np.asarray(seeds, dtype=float))[:N]
        X[: S.shape[0]] = np.clip(S, bounds[:, 0], bounds[:, 1])
    fv = np.empty(N)
    gv = np.zeros((N, problem.J))
    for i in range(N):
        fv[i], gv[i] = charge_lower(problem, x_u, X[i], counter)
    viol = [violation(row) for row in gv]
    keys = [deb_key(fv[i], viol[i]) for i in range(N)]
    var0 = float(X.var(axis=0).sum())

    for _ in range(params.max_gens):
        par = select_parents(keys, params, rng)
        par_keys = [keys[i] for i in par]
        kids = [make_offspring(X[par], par_keys, bounds, params, rng) for _ in range(params.offspring_lambda)]
        kid_vals = [charge_lower(problem, x_u, c, counter) for c in kids]
        kid_viol = [violation(gk) for _, gk in kid_vals]
        kid_keys = [deb_key(fk, vk) for (fk, _), vk in zip(kid_vals, kid_viol)]
        for slot, src in replace_from_pool(keys, kid_keys, params.replace_r, rng):
            if src < 0:
                j = -src - 1
                X[slot] = kids[j]
                fv[slot], gv[slot] = kid_vals[j]
                viol[slot], keys[slot] = kid_viol[j], kid_keys[j]
            elif src != slot:
                X[slot], fv[slot], gv[slot] = X[src], fv[src], gv[src]
                viol[slot], keys[slot] = viol[src], keys[src]
        if var0 <= 0.0 or float(X.var(axis=0).sum()) / var0 < params.alpha_stop:
            break

    best = min(range(N), key=keys.__getitem__)
    return LocalSolveReport(
        x_opt=X[best].copy(),
        f_opt=float(fv[best]),
        violation=float(viol[best]),
        converged=viol[best] <= FEAS_TOL,
        evals_used=counter.ll_evals - start,
        samples=(X.copy(), fv.copy(), gv.copy()),
    )


# ---------------------------------------------------------------- local solver

_FD_STEP = np.finfo(float).eps ** (1.0 / 3.0)


def fd_gradient(fun: Callable[[np.ndarray], np.ndarray], x, bounds=None) -> np.ndarray:
    """Central differences with step ``eps^(1/3) * max(1, |x_i|)``.

    ``fun`` may return a scalar or a vector; the result has shape
    ``(len(x),)`` or ``(k, len(x))``. Falls back to a one-sided difference
    where a central probe would leave the box.
    """
    x = np.asarray(x, dtype=float)
    b = None if bounds is None else np.asarray(bounds, dtype=float)
    f0 = None
    cols = []
    for i in range(x.size):
        h = _FD_STEP * max(1.0, abs(x[i]))
        lo_ok = b is None or x[i] - h >= b[i, 0]
        hi_ok = b is None or x[i] + h <= b[i, 1]
        e = np.zeros_like(x)
        e[i] = h
        if lo_ok and hi_ok:
            cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h))
        else:
            if f0 is None:
                f0 = np.asarray(fun(x))
            if hi_ok:
                cols.append((np.asarray(fun(x + e)) - f0) / h)
            else:
                cols.append((f0 - np.asarray(fun(x - e))) / h)
    return np.stack(cols, axis=-1)


class _PointCache:
    """Evaluates objective and constraints together once per distinct point."""

    def __init__(self, objective, constraints, charge, keep_samples):
        self.objective = objective
        self.constraints = constraints
        self.charge = charge
        self.cache: dict[bytes, tuple[float, np.ndarray]] = {}
        self.evals = 0
        self.best_feasible: Optional[tuple[float, np.ndarray]] = None
        self.least_violating: Optional[tuple[float, float, np.ndarray]] = None
        self.keep_samples = keep_samples
        self.trail: list[tuple[np.ndarray, float, np.ndarray]] = []

    def __call__(self, x, probe=False):
        key = x.tobytes()
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        obj = float(self.objective(x))
        cons = np.atleast_1d(np.asarray(self.constraints(x), dtype=float)) if self.constraints else np.zeros(0)
        if self.charge is not None:
            self.charge()
        self.evals += 1
        self.cache[key] = (obj, cons)
        v = violation(cons)
        if v <= FEAS_TOL and np.isfinite(obj):
            if self.best_feasible is None or obj < self.best_feasible[0]:
                self.best_feasible = (obj, x.copy())
        elif self.least_violating is None or v < self.least_violating[0]:
            self.least_violating = (v, obj, x.copy())
        if self.keep_samples and not probe:
            self.trail.append((x.copy(), obj, cons))
        return obj, cons


def local_solve(objective: Callable, constraints: Optional[Callable], bounds, x0,
                counter: Optional[EvalCounter] = None, level: Level = Level.LOWER,
                charge: Optional[Callable[[], None]] = None, tol: float = 1e-6,
                max_iter: int = 200, keep_samples: bool = False) -> LocalSolveReport:
    """Minimize ``objective`` subject to ``constraints(x) <= 0`` inside a box.

    SLSQP with central finite-difference gradients. Every distinct point
    probed, including difference probes, is charged once to ``counter`` at
    ``level`` (or to ``charge`` when given). Stops when the objective
    improves by less than ``tol`` or after ``max_iter`` iterations.
    """
    b = np.asarray(bounds, dtype=float)
    x0 = np.clip(np.asarray(x0, dtype=float), b[:, 0], b[:, 1])
    if charge is None and counter is not None:
        if level is Level.UPPER:
            def charge():
                counter.ul_evals += 1
        else:
            def charge():
                counter.ll_evals += 1
    ev = _PointCache(objective, constraints, charge, keep_samples)

    grads: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def gradients(x):
        key = x.tobytes()
        if key not in grads:
            ev(x)

            def both(p):
                o, c = ev(np.clip(p, b[:, 0], b[:, 1]), probe=True)
                return np.concatenate([[o], c])

            jac = np.atleast_2d(fd_gradient(both, x, b))
            grads[key] = (jac[0], jac[1:])
        return grads[key]

    fun = lambda x: ev(x)[0]
    jac = lambda x: gradients(x)[0]
    cons = []
    if constraints is not None:
        cons.append({
            "type": "ineq",
            "fun": lambda x: -ev(x)[1],
            "jac": lambda x: -gradients(x)[1],
        })

    status, message = -1, ""
    try:
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(fun, x0, jac=jac, bounds=b, constraints=cons, method="SLSQP",
                           options={"ftol": tol, "maxiter": max_iter})
        x_final = np.clip(res.x, b[:, 0], b[:, 1])
        status, message = int(getattr(res, "status", -1)), str(getattr(res, "message", ""))
    except (ValueError, np.linalg.LinAlgError, OverflowError) as exc:  # pragma: no cover - defensive
        x_final, message = x0, f"solver error: {exc}"

    obj, c = ev(x_final)
    v = violation(c)
    if v > FEAS_TOL or not np.isfinite(obj):
        if ev.best_feasible is not None:
            obj, x_final = ev.best_feasible
            v = 0.0
        elif ev.least_violating is not None and ev.least_violating[0] < v:
            v, obj, x_final = ev.least_violating
    elif ev.best_feasible is not None and ev.best_feasible[0] < obj - 1e-12 * (1 + abs(obj)):
        obj, x_final = ev.best_feasible
        v = violation(ev(x_final)[1])

    converged = v <= FEAS_TOL and status in (0, 8)
    samples = None
    if keep_samples and ev.trail:
        samples = (
            np.array([t[0] for t in ev.trail]),
            np.array([t[1] for t in ev.trail]),
            np.array([t[2] for t in ev.trail]).reshape(len(ev.trail), -1),
        )
    return LocalSolveReport(np.array(x_final, dtype=float), float(obj), float(v), converged,
                            ev.evals, samples, message)
