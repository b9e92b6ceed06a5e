"""Benchmark catalog: TP1-TP8, their set-valued variants m-TP1-m-TP8, SMD13 and SMD14.

Constraints are stored as ``c(x_u, x_l) <= 0``; ">=" rows are negated at
definition time. Variables with a one-sided bound get a synthetic upper bound
of 100, and SMD13's open interval ``d in (0, 10]`` starts at 1e-6.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import BilevelProblem, KnownOptimum, UsageError

SYNTHETIC_UPPER = 100.0
SMD13_D_FLOOR = 1e-6


def _box(low, high, size):
    return np.tile([float(low), float(high)], (size, 1))


# ---------------------------------------------------------------- TP1..TP8


def _tp1():
    return BilevelProblem(
        name="tp1",
        n=2,
        m=2,
        upper_bounds=_box(0, 50, 2),
        lower_bounds=_box(0, 10, 2),
        F=lambda x, y: (x[0] - 30) ** 2 + (x[1] - 20) ** 2 - 20 * y[0] + 20 * y[1],
        f=lambda x, y: (x[0] - y[0]) ** 2 + (x[1] - y[1]) ** 2,
        G=(
            lambda x, y: 30 - x[0] - 2 * x[1],
            lambda x, y: x[0] + x[1] - 25,
            lambda x, y: x[1] - 15,
        ),
        known_optimum=KnownOptimum(225.0, 100.0),
    )


def _tp2_lower(x, y):
    return (y[0] - x[0] + 20) ** 2 + (y[1] - x[1] + 20) ** 2


def _tp2():
    return BilevelProblem(
        name="tp2",
        n=2,
        m=2,
        upper_bounds=_box(0, 50, 2),
        lower_bounds=_box(-10, 20, 2),
        F=lambda x, y: 2 * x[0] + 2 * x[1] - 3 * y[0] - 3 * y[1] - 60,
        f=_tp2_lower,
        G=(lambda x, y: x[0] + x[1] + y[0] - 2 * y[1] - 40,),
        g=(
            lambda x, y: 10 - x[0] + 2 * y[0],
            lambda x, y: 10 - x[1] + 2 * y[1],
        ),
        known_optimum=KnownOptimum(0.0, 100.0),
    )


def _tp3():
    return BilevelProblem(
        name="tp3",
        n=2,
        m=2,
        upper_bounds=_box(0, SYNTHETIC_UPPER, 2),
        lower_bounds=_box(0, SYNTHETIC_UPPER, 2),
        F=lambda x, y: -x[0] ** 2 - 3 * x[1] ** 2 - 4 * y[0] + y[1] ** 2,
        f=lambda x, y: 2 * x[0] ** 2 + y[0] ** 2 - 5 * y[1],
        G=(lambda x, y: x[0] ** 2 + 2 * x[1] - 4,),
        g=(
            lambda x, y: -(x[0] ** 2 - 2 * x[0] + x[1] ** 2 - 2 * y[0] + y[1]) - 3,
            lambda x, y: 4 - x[1] - 3 * y[0] + 4 * y[1],
        ),
        known_optimum=KnownOptimum(-18.6787, -1.0156),
    )


def _tp4():
    return BilevelProblem(
        name="tp4",
        n=2,
        m=3,
        upper_bounds=_box(0, SYNTHETIC_UPPER, 2),
        lower_bounds=_box(0, SYNTHETIC_UPPER, 3),
        F=lambda x, y: -8 * x[0] - 4 * x[1] + 4 * y[0] - 40 * y[1] - 4 * y[2],
        f=lambda x, y: x[0] + 2 * x[1] + y[0] + y[1] + 2 * y[2],
        g=(
            lambda x, y: y[1] + y[2] - y[0] - 1,
            lambda x, y: 2 * x[0] - y[0] + 2 * y[1] - 0.5 * y[2] - 1,
            lambda x, y: 2 * x[1] + 2 * y[0] - y[1] - 0.5 * y[2] - 1,
        ),
        known_optimum=KnownOptimum(-29.2, 3.2),
    )


_TP5_H = np.array([[1.0, 3.0], [3.0, 10.0]])
_TP5_B = np.array([[-1.0, 2.0], [3.0, -3.0]])
_TP5_R = 0.1


def _tp5():
    # "t(b(x)) y" is read as (B x)^T y.
    def F(x, y):
        return _TP5_R * (x @ x) - 3 * y[0] - 4 * y[1] + 0.5 * (y @ y)

    def f(x, y):
        return 0.5 * (y @ _TP5_H @ y) - (_TP5_B @ x) @ y

    return BilevelProblem(
        name="tp5",
        n=2,
        m=2,
        upper_bounds=_box(0, 10, 2),
        lower_bounds=_box(0, SYNTHETIC_UPPER, 2),
        F=F,
        f=f,
        g=(
            lambda x, y: -0.333 * y[0] + y[1] - 2,
            lambda x, y: y[0] - 0.333 * y[1] - 2,
        ),
        known_optimum=KnownOptimum(-3.6, -2.0),
    )


def _tp6():
    return BilevelProblem(
        name="tp6",
        n=1,
        m=2,
        upper_bounds=_box(0, SYNTHETIC_UPPER, 1),
        lower_bounds=_box(0, SYNTHETIC_UPPER, 2),
        F=lambda x, y: (x[0] - 1) ** 2 + 2 * y[0] - 2 * x[0],
        f=lambda x, y: (2 * y[0] - 4) ** 2 + (2 * y[1] - 1) ** 2 + x[0] * y[0],
        g=(
            lambda x, y: 4 * x[0] + 5 * y[0] + 4 * y[1] - 12,
            lambda x, y: 4 * y[1] - 4 * x[0] - 5 * y[0] + 4,
            lambda x, y: 4 * x[0] - 4 * y[0] + 5 * y[1] - 4,
            lambda x, y: 4 * y[0] - 4 * x[0] + 5 * y[1] - 4,
        ),
        known_optimum=KnownOptimum(-1.2091, 7.6145),
    )


def _tp7_ratio(x, y):
    return (x[0] + y[0]) * (x[1] + y[1]) / (1 + x[0] * y[0] + x[1] * y[1])


def _tp7():
    return BilevelProblem(
        name="tp7",
        n=2,
        m=2,
        upper_bounds=_box(0, SYNTHETIC_UPPER, 2),
        lower_bounds=_box(0, SYNTHETIC_UPPER, 2),
        F=lambda x, y: -_tp7_ratio(x, y),
        f=_tp7_ratio,
        G=(
            lambda x, y: x[0] ** 2 + x[1] ** 2 - 100,
            lambda x, y: x[0] - x[1],
        ),
        g=(
            lambda x, y: y[0] - x[0],
            lambda x, y: y[1] - x[1],
        ),
        known_optimum=KnownOptimum(-1.96, 1.96),
        # fractional lower level: guard against the wrong basin
        ll_starts=3,
    )


def _tp8():
    return BilevelProblem(
        name="tp8",
        n=2,
        m=2,
        upper_bounds=_box(0, 50, 2),
        lower_bounds=_box(-10, 20, 2),
        F=lambda x, y: abs(2 * x[0] + 2 * x[1] - 3 * y[0] - 3 * y[1] - 60),
        f=_tp2_lower,
        G=(lambda x, y: x[0] + x[1] + y[0] - 2 * y[1] - 40,),
        g=(
            lambda x, y: 2 * y[0] - x[0] + 10,
            lambda x, y: 2 * y[1] - x[1] + 10,
        ),
        known_optimum=KnownOptimum(0.0, 100.0),
    )


_TP = {1: _tp1, 2: _tp2, 3: _tp3, 4: _tp4, 5: _tp5, 6: _tp6, 7: _tp7, 8: _tp8}


def make_tp(id: int) -> BilevelProblem:
    if id not in _TP:
        raise UsageError(f"unknown TP id {id!r}; expected 1..8")
    return _TP[id]()


def make_mtp(id: int) -> BilevelProblem:
    """TP ``id`` with two extra lower-level variables that make the reaction set set-valued.

    ``F + y_p^2 + y_q^2`` and ``f + (y_p - y_q)^2``: every ``y_p = y_q`` is
    lower-level optimal and the leader prefers ``y_p = y_q = 0``.
    """
    base = make_tp(id)
    m = base.m

    def wrap(c):
        return lambda x, y: c(x, y[:m])

    def F(x, y):
        return base.F(x, y[:m]) + y[m] ** 2 + y[m + 1] ** 2

    def f(x, y):
        return base.f(x, y[:m]) + (y[m] - y[m + 1]) ** 2

    opt = base.known_optimum
    return BilevelProblem(
        name=f"mtp{id}",
        n=base.n,
        m=m + 2,
        upper_bounds=base.upper_bounds.copy(),
        lower_bounds=np.vstack([base.lower_bounds, _box(-1, 1, 2)]),
        F=F,
        f=f,
        G=tuple(wrap(c) for c in base.G),
        g=tuple(wrap(c) for c in base.g),
        ll_convex=base.ll_convex,
        known_optimum=KnownOptimum(opt.F_star, opt.f_star),
        ll_starts=base.ll_starts,
    )


# ---------------------------------------------------------------- SMD


@dataclass(frozen=True)
class SmdDims:
    """Sub-vector sizes: a has p, b and d have r, c has q (+ s for SMD14)."""

    p: int
    q: int
    r: int
    s: int = 0

    def __post_init__(self):
        if self.p < 1 or self.r < 1 or self.q < 0 or self.s < 0:
            raise UsageError(f"invalid SMD dims {self}: need p>=1, r>=1, q>=0, s>=0")

    @classmethod
    def parse(cls, text: str) -> "SmdDims":
        parts = [int(v) for v in text.replace(" ", "").split(",") if v != ""]
        if len(parts) not in (3, 4):
            raise UsageError(f"dims must be 'p,q,r' or 'p,q,r,s', got {text!r}")
        return cls(*parts)

    def as_text(self) -> str:
        return f"{self.p},{self.q},{self.r},{self.s}"


def _smd_F1(a):
    out = (a[0] - 1.0) ** 2
    if a.size > 1:
        out += np.sum((a[:-1] - 1.0) ** 2 + (a[1:] - a[:-1] ** 2) ** 2)
    return out


def _nested_square_sum(v):
    # sum_{i=1}^{k} sum_{j=1}^{i} v_j^2 == sum_j (k - j + 1) v_j^2
    k = v.size
    if k == 0:
        return 0.0
    return float(np.arange(k, 0, -1) @ (v * v))


def make_smd13(dims: SmdDims) -> BilevelProblem:
    p, q, r = dims.p, dims.q, dims.r
    if dims.s:
        raise UsageError("SMD13 takes no s component")

    def split(x, y):
        return x[:p], x[p:], y[:q], y[q:]

    def F(x, y):
        a, b, c, d = split(x, y)
        log_d = np.log(np.maximum(d, SMD13_D_FLOOR))
        return float(
            _smd_F1(a) - _nested_square_sum(c) + _nested_square_sum(b) - np.sum((b - log_d) ** 2)
        )

    def f(x, y):
        a, b, c, d = split(x, y)
        log_d = np.log(np.maximum(d, SMD13_D_FLOOR))
        return float(
            np.sum(np.abs(a) + 2 * np.abs(np.sin(a))) + _nested_square_sum(c) + np.sum((b - log_d) ** 2)
        )

    upper = np.vstack([_box(-5, 10, p), _box(-5, math.e, r)])
    lower = np.vstack([_box(-5, 10, q), _box(SMD13_D_FLOOR, 10, r)])
    x_u = np.concatenate([np.ones(p), np.zeros(r)])
    x_l = np.concatenate([np.zeros(q), np.ones(r)])
    return BilevelProblem(
        name="smd13",
        n=p + r,
        m=q + r,
        upper_bounds=upper,
        lower_bounds=lower,
        F=F,
        f=f,
        ll_convex=False,
        known_optimum=KnownOptimum(0.0, p * (1.0 + 2.0 * math.sin(1.0)), x_u, x_l),
    )


def make_smd14(dims: SmdDims) -> BilevelProblem:
    p, q, r, s = dims.p, dims.q, dims.r, dims.s
    powers = np.arange(2, q + 2)  # |c_i|^(i+1), 1-based i
    weights = np.arange(1, r + 1)

    def split(x, y):
        return x[:p], x[p:], y[: q + s], y[q + s :]

    def F(x, y):
        a, b, c, d = split(x, y)
        head, tail = c[:q], c[q:]
        return float(
            _smd_F1(a)
            - np.sum(np.abs(head) ** powers)
            + np.sum(tail**2)
            + weights @ (b * b)
            - np.sum(np.abs(d))
        )

    def f(x, y):
        a, b, c, d = split(x, y)
        head, tail = c[:q], c[q:]
        # adjacent pairs (c_{q+1}, c_{q+2}), (c_{q+3}, c_{q+4}), ...
        pairs = tail[: 2 * (s // 2)].reshape(-1, 2)
        return float(
            np.sum(np.floor(a))
            + np.sum(np.abs(head) ** powers)
            + np.sum((pairs[:, 1] - pairs[:, 0]) ** 2)
            + np.sum(np.abs(b * b - d * d))
        )

    x_u = np.concatenate([np.ones(p), np.zeros(r)])
    x_l = np.zeros(q + s + r)
    return BilevelProblem(
        name="smd14",
        n=p + r,
        m=q + s + r,
        upper_bounds=_box(-5, 10, p + r),
        lower_bounds=_box(-5, 10, q + s + r),
        F=F,
        f=f,
        ll_convex=False,
        known_optimum=KnownOptimum(0.0, float(p), x_u, x_l),
    )


# ---------------------------------------------------------------- registry

PAPER_DIMS = {
    ("smd13", 5): SmdDims(1, 2, 1),
    ("smd14", 5): SmdDims(1, 0, 1, 2),
    ("smd13", 10): SmdDims(3, 3, 2),
    ("smd14", 10): SmdDims(3, 1, 2, 2),
}

_REGISTRY: dict[str, tuple[Callable[..., BilevelProblem], bool]] = {}


def register(name: str, factory: Callable[..., BilevelProblem], needs_dims: bool = False) -> None:
    """Add an instance factory; ``factory(dims)`` when ``needs_dims`` else ``factory()``."""
    _REGISTRY[name.lower()] = (factory, needs_dims)


for _i in range(1, 9):
    register(f"tp{_i}", lambda i=_i: make_tp(i))
    register(f"mtp{_i}", lambda i=_i: make_mtp(i))
register("smd13", make_smd13, needs_dims=True)
register("smd14", make_smd14, needs_dims=True)


def catalog() -> list[str]:
    return sorted(_REGISTRY, key=lambda k: (k.rstrip("0123456789"), int("0" + k[len(k.rstrip("0123456789")):])))


def registry_lookup(name: str, dims: Optional[SmdDims] = None) -> BilevelProblem:
    key = name.lower().replace("-", "")
    if key not in _REGISTRY:
        raise UsageError(f"unknown problem {name!r}; catalog: {', '.join(catalog())}")
    factory, needs_dims = _REGISTRY[key]
    if needs_dims:
        if dims is None:
            raise UsageError(f"{name} requires dims p,q,r[,s]")
        return factory(dims)
    return factory()
