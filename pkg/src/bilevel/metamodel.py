"""Least-squares quadratic and affine response surfaces.

Inputs are standardized per coordinate before the solve; raw-coordinate
coefficients are available as properties, prediction stays in the
standardized frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np


class InsufficientDataError(ValueError):
    """Fewer samples than basis functions."""


def quadratic_basis_size(dim: int) -> int:
    return (dim + 1) * (dim + 2) // 2


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12 * (1.0 + np.abs(mean)), scale, 1.0)
    return (X - mean) / scale, mean, scale


def _quadratic_design(Z: np.ndarray) -> np.ndarray:
    n = Z.shape[1]
    iu, ju = np.triu_indices(n)
    return np.hstack([np.ones((Z.shape[0], 1)), Z, Z[:, iu] * Z[:, ju]])


def _as_samples(inputs, targets) -> tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    return X, y


@dataclass(frozen=True)
class QuadraticModel:
    """Second-order polynomial ``c + w.x + x.Q.x`` (Q symmetric).

    Held in standardized coordinates ``z = (x - center) / scale``; the raw
    coefficients are derived on request.
    """

    dim: int
    center: np.ndarray
    scale: np.ndarray
    coef_z: np.ndarray  # [c, w_z, upper-triangle quadratic terms in z]
    mse: float
    rank_deficient: bool = False

    @property
    def n_coefficients(self) -> int:
        return quadratic_basis_size(self.dim)

    def _z_parts(self):
        n = self.dim
        iu, ju = np.triu_indices(n)
        Qz = np.zeros((n, n))
        Qz[iu, ju] = self.coef_z[1 + n :]
        return self.coef_z[0], self.coef_z[1 : 1 + n], 0.5 * (Qz + Qz.T)

    @property
    def quadratic(self) -> np.ndarray:
        _, _, Qz = self._z_parts()
        d = 1.0 / self.scale
        return Qz * np.outer(d, d)

    @property
    def linear(self) -> np.ndarray:
        _, wz, _ = self._z_parts()
        return wz / self.scale - 2.0 * self.quadratic @ self.center

    @property
    def intercept(self) -> float:
        c, wz, _ = self._z_parts()
        Q = self.quadratic
        return float(c - (wz / self.scale) @ self.center + self.center @ Q @ self.center)

    def coefficients(self) -> np.ndarray:
        """Raw ``[c, w, Q_ii / 2 Q_ij (i<j)]`` in upper-triangle order."""
        iu, ju = np.triu_indices(self.dim)
        quad = np.where(iu == ju, 1.0, 2.0) * self.quadratic[iu, ju]
        return np.concatenate([[self.intercept], self.linear, quad])

    @cached_property
    def _upper_z(self) -> np.ndarray:
        U = np.zeros((self.dim, self.dim))
        U[np.triu_indices(self.dim)] = self.coef_z[1 + self.dim :]
        return U

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            z = (x - self.center) / self.scale
            return float(self.coef_z[0] + self.coef_z[1 : 1 + self.dim] @ z + z @ self._upper_z @ z)
        z = (x - self.center) / self.scale
        return _quadratic_design(z) @ self.coef_z


@dataclass(frozen=True)
class LinearModel:
    dim: int
    center: np.ndarray
    scale: np.ndarray
    coef_z: np.ndarray
    mse: float
    rank_deficient: bool = False

    @property
    def linear(self) -> np.ndarray:
        return self.coef_z[1:] / self.scale

    @property
    def intercept(self) -> float:
        return float(self.coef_z[0] - self.linear @ self.center)

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        out = self.coef_z[0] + ((x - self.center) / self.scale) @ self.coef_z[1:]
        return float(out) if x.ndim == 1 else out


def fit_quadratic(inputs, targets) -> QuadraticModel:
    X, y = _as_samples(inputs, targets)
    n = X.shape[1]
    p = quadratic_basis_size(n)
    if X.shape[0] < p:
        raise InsufficientDataError(f"quadratic fit in {n}-D needs {p} samples, got {X.shape[0]}")
    Z, mean, scale = _standardize(X)
    A = _quadratic_design(Z)
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return QuadraticModel(n, mean, scale, coef, float(resid @ resid) / X.shape[0], rank < p)


def fit_linear(inputs, targets) -> LinearModel:
    X, y = _as_samples(inputs, targets)
    n = X.shape[1]
    if X.shape[0] < n + 1:
        raise InsufficientDataError(f"affine fit in {n}-D needs {n + 1} samples, got {X.shape[0]}")
    Z, mean, scale = _standardize(X)
    A = np.hstack([np.ones((Z.shape[0], 1)), Z])
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return LinearModel(n, mean, scale, coef, float(resid @ resid) / X.shape[0], rank < n + 1)


@dataclass(frozen=True)
class PsiModel:
    """One quadratic per lower-level variable, mapping x_u to the optimal x_l."""

    per_variable: tuple[QuadraticModel, ...]

    @property
    def mse(self) -> float:
        return float(np.mean([m.mse for m in self.per_variable]))

    def predict(self, x_u) -> np.ndarray:
        return np.array([m.predict(x_u) for m in self.per_variable])


@dataclass(frozen=True)
class PhiModel:
    """Quadratic map from x_u to the optimal lower-level objective value."""

    model: QuadraticModel

    @property
    def mse(self) -> float:
        return self.model.mse

    def predict(self, x_u) -> float:
        return self.model.predict(x_u)


def fit_psi(neighbors: Sequence) -> PsiModel:
    X = np.array([ind.x_u for ind in neighbors])
    Y = np.array([ind.x_l for ind in neighbors])
    if len(neighbors) < quadratic_basis_size(X.shape[1] if X.ndim == 2 else 0):
        raise InsufficientDataError(f"only {len(neighbors)} archive members for the reaction-set fit")
    return PsiModel(tuple(fit_quadratic(X, Y[:, j]) for j in range(Y.shape[1])))


def fit_phi(neighbors: Sequence) -> PhiModel:
    X = np.array([ind.x_u for ind in neighbors])
    if len(neighbors) < quadratic_basis_size(X.shape[1] if X.ndim == 2 else 0):
        raise InsufficientDataError(f"only {len(neighbors)} archive members for the value-function fit")
    return PhiModel(fit_quadratic(X, [ind.f_val for ind in neighbors]))
