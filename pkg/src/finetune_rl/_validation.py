"""Input validation and random-source helpers shared across the package."""

from __future__ import annotations

import numbers

import numpy as np

SYM_TOL = 1e-9


class DimensionMismatchError(ValueError):
    """Raised when two objects disagree on S, A, H or d."""


class BudgetExceededError(RuntimeError):
    """An episode or enumeration budget was exhausted."""


class UnsatisfiableCoverageError(RuntimeError):
    """A coverage target cannot be met because a direction is unreachable."""


def check_random_state(seed) -> np.random.Generator:
    """Turn ``seed`` into a counter-based :class:`numpy.random.Generator`.

    Integers and :class:`numpy.random.SeedSequence` objects seed a fresh
    Philox stream; an existing Generator is returned unchanged so callers can
    thread one source through a whole run.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.Generator(np.random.Philox(seed))
    raise TypeError(f"cannot build a random source from {type(seed).__name__}")


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams; consumes nothing from ``rng`` itself."""
    return list(rng.spawn(n))


def check_positive(value, name: str, *, strict: bool = True) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0 or (strict and value == 0):
        bound = "> 0" if strict else ">= 0"
        raise ValueError(f"{name} must be {bound}, got {value}")
    return value


def check_probability(value, name: str) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_symmetric(matrix, name: str = "matrix", *, psd: bool = False) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{name} must be square, got shape {matrix.shape}")
    scale = max(1.0, float(np.abs(matrix).max(initial=0.0)))
    if not np.allclose(matrix, matrix.T, atol=SYM_TOL * scale, rtol=0.0):
        raise ValueError(f"{name} must be symmetric")
    if psd:
        low = np.linalg.eigvalsh((matrix + matrix.T) / 2)[0]
        if low < -1e-8 * scale:
            raise ValueError(f"{name} must be positive semidefinite (min eigenvalue {low:.3g})")
    return (matrix + matrix.T) / 2


def check_invertible(matrix, name: str = "matrix", *, rcond: float = 1e-12) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    eig = np.linalg.eigvalsh(matrix)
    if eig[0] <= rcond * max(1.0, abs(eig[-1])):
        raise np.linalg.LinAlgError(
            f"{name} is singular (min eigenvalue {eig[0]:.3g}); add ridge regularization "
            "or collect data in the missing directions"
        )
    return matrix


def min_eig(matrix, basis=None) -> float:
    """Smallest eigenvalue, optionally of the compression onto ``basis`` columns."""
    matrix = np.asarray(matrix, dtype=float)
    if basis is not None:
        matrix = basis.T @ matrix @ basis
    if matrix.size == 0:
        return np.inf
    return float(np.linalg.eigvalsh((matrix + matrix.T) / 2)[0])
