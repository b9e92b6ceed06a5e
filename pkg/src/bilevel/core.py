"""Problem abstraction, evaluation accounting and the feasibility-first comparison."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# Violations at or below this are treated as feasible.
FEAS_TOL = 1e-6

Objective = Callable[[np.ndarray, np.ndarray], float]


class UsageError(ValueError):
    """Raised for invalid arguments: wrong dimensions, unknown names, bad presets."""


class Level(enum.Enum):
    UPPER = "upper"
    LOWER = "lower"


class Tag(enum.IntEnum):
    TAG0 = 0  # x_l is a prediction
    TAG1 = 1  # x_l came from a completed lower-level optimization


@dataclass(frozen=True)
class KnownOptimum:
    F_star: float
    f_star: float
    x_u: Optional[np.ndarray] = None
    x_l: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class BilevelProblem:
    """One bilevel instance. All constraints are in ``c(x_u, x_l) <= 0`` form."""

    name: str
    n: int
    m: int
    upper_bounds: np.ndarray  # shape (n, 2)
    lower_bounds: np.ndarray  # shape (m, 2)
    F: Objective
    f: Objective
    G: tuple[Objective, ...] = ()
    g: tuple[Objective, ...] = ()
    ll_convex: bool = True
    known_optimum: Optional[KnownOptimum] = None
    ll_starts: int = 1

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise UsageError(f"{self.name}: need n >= 1 and m >= 1")
        ub = np.asarray(self.upper_bounds, dtype=float).reshape(self.n, 2)
        lb = np.asarray(self.lower_bounds, dtype=float).reshape(self.m, 2)
        for b in (ub, lb):
            if not np.all(np.isfinite(b)) or np.any(b[:, 0] > b[:, 1]):
                raise UsageError(f"{self.name}: bounds must be finite with low <= high")
        object.__setattr__(self, "upper_bounds", ub)
        object.__setattr__(self, "lower_bounds", lb)
        object.__setattr__(self, "G", tuple(self.G))
        object.__setattr__(self, "g", tuple(self.g))

    @property
    def K(self) -> int:
        return len(self.G)

    @property
    def J(self) -> int:
        return len(self.g)

    def check_dims(self, x_u, x_l) -> tuple[np.ndarray, np.ndarray]:
        x_u = np.asarray(x_u, dtype=float)
        x_l = np.asarray(x_l, dtype=float)
        if x_u.shape != (self.n,) or x_l.shape != (self.m,):
            raise UsageError(
                f"{self.name}: expected x_u of length {self.n} and x_l of length "
                f"{self.m}, got shapes {x_u.shape} and {x_l.shape}"
            )
        return x_u, x_l

    def upper_values(self, x_u, x_l) -> tuple[float, np.ndarray]:
        """Uncounted F and the vector of G_k."""
        return float(self.F(x_u, x_l)), np.array([c(x_u, x_l) for c in self.G], dtype=float)

    def lower_values(self, x_u, x_l) -> tuple[float, np.ndarray]:
        """Uncounted f and the vector of g_j."""
        return float(self.f(x_u, x_l)), np.array([c(x_u, x_l) for c in self.g], dtype=float)

    def clip_upper(self, x_u) -> np.ndarray:
        return np.clip(x_u, self.upper_bounds[:, 0], self.upper_bounds[:, 1])

    def clip_lower(self, x_l) -> np.ndarray:
        return np.clip(x_l, self.lower_bounds[:, 0], self.lower_bounds[:, 1])


def violation(constraint_values) -> float:
    """Unweighted sum of positive parts."""
    c = np.asarray(constraint_values, dtype=float)
    if c.size == 0:
        return 0.0
    return float(np.sum(np.maximum(c, 0.0)))


@dataclass
class EvalCounter:
    ul_evals: int = 0
    ll_evals: int = 0

    @property
    def total(self) -> int:
        return self.ul_evals + self.ll_evals

    def copy(self) -> "EvalCounter":
        return EvalCounter(self.ul_evals, self.ll_evals)


def charge_upper(problem: BilevelProblem, x_u, x_l, counter: EvalCounter) -> tuple[float, np.ndarray]:
    """F and the raw G vector; one upper-level evaluation."""
    F_val, G_vals = problem.upper_values(x_u, x_l)
    counter.ul_evals += 1
    return F_val, G_vals


def charge_lower(problem: BilevelProblem, x_u, x_l, counter: EvalCounter) -> tuple[float, np.ndarray]:
    """f and the raw g vector; one lower-level evaluation."""
    f_val, g_vals = problem.lower_values(x_u, x_l)
    counter.ll_evals += 1
    return f_val, g_vals


def evaluate_upper(problem: BilevelProblem, x_u, x_l, counter: EvalCounter) -> tuple[float, float]:
    """Return ``(F, upper violation)`` and charge one upper-level evaluation."""
    x_u, x_l = problem.check_dims(x_u, x_l)
    F_val, G_vals = charge_upper(problem, x_u, x_l, counter)
    return F_val, violation(G_vals)


def evaluate_lower(problem: BilevelProblem, x_u, x_l, counter: EvalCounter) -> tuple[float, float]:
    """Return ``(f, lower violation)`` and charge one lower-level evaluation."""
    x_u, x_l = problem.check_dims(x_u, x_l)
    f_val, g_vals = charge_lower(problem, x_u, x_l, counter)
    return f_val, violation(g_vals)


@dataclass
class Individual:
    x_u: np.ndarray
    x_l: np.ndarray
    F_val: float = np.nan
    f_val: float = np.nan
    ul_violation: float = np.nan
    ll_violation: float = np.nan
    tag: Tag = Tag.TAG0

    @property
    def ul_feasible(self) -> bool:
        return self.ul_violation <= FEAS_TOL

    @property
    def feasible(self) -> bool:
        return self.ul_violation <= FEAS_TOL and self.ll_violation <= FEAS_TOL


def deb_key(objective: float, viol: float) -> tuple[int, float]:
    """Sort key for the feasibility-first rule; smaller is better."""
    if viol <= FEAS_TOL:
        return (0, objective)
    return (1, viol)


def fitness_key(ind: Individual, level: Level = Level.UPPER) -> tuple[int, float]:
    if level is Level.UPPER:
        return deb_key(ind.F_val, ind.ul_violation)
    return deb_key(ind.f_val, ind.ll_violation)


def compare_deb(a: Individual, b: Individual, level: Level = Level.UPPER) -> int:
    """-1 if ``a`` is better, 1 if ``b`` is better, 0 on a tie.

    Feasible beats infeasible, feasible pairs compare on the objective and
    infeasible pairs on aggregate violation. At the upper level only F and
    the upper constraints are consulted.
    """
    ka, kb = fitness_key(a, level), fitness_key(b, level)
    if ka < kb:
        return -1
    if kb < ka:
        return 1
    return 0


@dataclass
class Archive:
    """Growing store of Tag-1 members."""

    capacity: Optional[int] = None
    entries: list[Individual] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, ind: Individual) -> None:
        if ind.tag is not Tag.TAG1:
            raise UsageError("only Tag-1 individuals may enter the archive")
        self.entries.append(ind)
        if self.capacity is not None and len(self.entries) > self.capacity:
            del self.entries[0]

    def upper_matrix(self) -> np.ndarray:
        return np.array([e.x_u for e in self.entries])

    def nearest(self, x_u, count: int) -> list[Individual]:
        """``count`` entries closest to ``x_u``; ties keep insertion order."""
        if not self.entries or count <= 0:
            return []
        d = np.linalg.norm(self.upper_matrix() - np.asarray(x_u, dtype=float), axis=1)
        order = np.argsort(d, kind="stable")[:count]
        return [self.entries[i] for i in order]


def best_index(population: Sequence[Individual], level: Level = Level.UPPER) -> int:
    return min(range(len(population)), key=lambda i: fitness_key(population[i], level))
