"""Calibrated inference-time procedures.

A calibrated procedure reweights a policy by a function ``g`` of each
sample's calibrated reward under that same policy.  ``g`` is exposed on
[0, 1] together with its integral ``G(u) = int_0^u g``, which is the output
CDF of the procedure applied to the base policy (up to normalisation).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidParameter, UnsupportedProcedure

REWIND_FALLBACKS = ("last", "best")


class InferenceProcedure:
    label: str = "procedure"

    def g(self, u) -> np.ndarray:
        raise NotImplementedError

    def G(self, u) -> np.ndarray:
        """Antiderivative of ``g`` with ``G(0) = 0``."""
        raise NotImplementedError

    def g_integral(self) -> float:
        return float(self.G(1.0))

    @property
    def draws(self) -> int:
        return 1


@dataclass(frozen=True)
class Identity(InferenceProcedure):
    @property
    def label(self) -> str:
        return "identity"

    def g(self, u):
        return np.ones_like(np.asarray(u, dtype=float))

    def G(self, u):
        return np.asarray(u, dtype=float) * 1.0


def _check_n(n) -> int:
    if int(n) != n or n < 1:
        raise InvalidParameter(f"N must be a positive integer, got {n!r}")
    return int(n)


@dataclass(frozen=True)
class BestOfN(InferenceProcedure):
    n: int

    def __post_init__(self):
        object.__setattr__(self, "n", _check_n(self.n))

    @property
    def label(self) -> str:
        return f"bon:{self.n}"

    @property
    def draws(self) -> int:
        return self.n

    def g(self, u):
        return np.asarray(u, dtype=float) ** (self.n - 1)

    def G(self, u):
        return np.asarray(u, dtype=float) ** self.n / self.n


@dataclass(frozen=True)
class WorstOfN(InferenceProcedure):
    n: int

    def __post_init__(self):
        object.__setattr__(self, "n", _check_n(self.n))

    @property
    def label(self) -> str:
        return f"won:{self.n}"

    @property
    def draws(self) -> int:
        return self.n

    def g(self, u):
        return (1.0 - np.asarray(u, dtype=float)) ** (self.n - 1)

    def G(self, u):
        return (1.0 - (1.0 - np.asarray(u, dtype=float)) ** self.n) / self.n


@dataclass(frozen=True)
class RewindRepeat(InferenceProcedure):
    """Draw until a sample's calibrated reward reaches ``phi``, at most ``n`` draws.

    ``fallback`` picks the output when every draw misses the threshold:
    ``last`` returns the final draw, ``best`` the highest of the ``n`` draws.
    The closed-form ``g`` is only available for ``last``.
    """

    phi: float
    n: int
    fallback: str = "last"

    def __post_init__(self):
        if not 0.0 <= self.phi <= 1.0:
            raise InvalidParameter(f"threshold phi must lie in [0, 1], got {self.phi!r}")
        object.__setattr__(self, "n", _check_n(self.n))
        if self.fallback not in REWIND_FALLBACKS:
            raise InvalidParameter(f"fallback must be one of {REWIND_FALLBACKS}")

    @property
    def label(self) -> str:
        return f"rewind:{self.phi!r}:{self.n}:{self.fallback}"

    @property
    def draws(self) -> int:
        return self.n

    @property
    def degenerate(self) -> bool:
        """Threshold that never changes the output distribution."""
        if self.phi == 0.0 or self.n == 1:
            return True
        return self.phi == 1.0 and self.fallback == "last"

    def levels(self) -> tuple[float, float]:
        """(g below the threshold, g at or above it) for the ``last`` fallback."""
        self._require_last()
        if self.degenerate:
            return 1.0, 1.0
        miss = self.phi ** (self.n - 1)
        return miss, (1.0 - miss) / (1.0 - self.phi) + miss

    def _require_last(self):
        if self.fallback != "last":
            raise UnsupportedProcedure(
                "closed-form g is only defined for rewind fallback 'last'; "
                "use the Monte Carlo oracle for 'best'"
            )

    def g(self, u):
        lo, hi = self.levels()
        u = np.asarray(u, dtype=float)
        return np.where(u >= self.phi, hi, lo) * 1.0

    def G(self, u):
        lo, hi = self.levels()
        u = np.asarray(u, dtype=float)
        return np.where(u < self.phi, lo * u, lo * self.phi + hi * (u - self.phi)) * 1.0


def rewind_repeat_g(phi: float, n: int, points: int = 2001) -> np.ndarray:
    """Tabulate the rewind-and-repeat ``g`` (last-draw fallback) on a uniform grid."""
    return RewindRepeat(phi, n).g(np.linspace(0.0, 1.0, points))


@dataclass(frozen=True, eq=False)
class Custom(InferenceProcedure):
    """Procedure given by tabulated nonnegative ``g`` values on a uniform grid."""

    g_values: np.ndarray
    name: str = "custom"
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vals = np.array(self.g_values, dtype=float)
        if vals.ndim != 1 or vals.size < 2:
            raise InvalidParameter("custom g needs at least 2 grid values")
        if np.any(~np.isfinite(vals)) or np.any(vals < 0):
            raise InvalidParameter("custom g must be finite and nonnegative")
        h = 1.0 / (vals.size - 1)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (vals[1:] + vals[:-1]))])
        if cum[-1] <= 0:
            raise InvalidParameter("custom g must have positive integral")
        vals.setflags(write=False)
        object.__setattr__(self, "g_values", vals)
        object.__setattr__(self, "_cum", cum)

    @property
    def label(self) -> str:
        return self.name

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.g_values.size)

    def g(self, u):
        return np.interp(np.asarray(u, dtype=float), self.grid, self.g_values)

    def G(self, u):
        # exact integral of the piecewise-linear interpolant
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        m = self.g_values.size - 1
        h = 1.0 / m
        idx = np.minimum((u / h).astype(int), m - 1)
        t = u - idx * h
        g0 = self.g_values[idx]
        slope = (self.g_values[idx + 1] - g0) / h
        return self._cum[idx] + g0 * t + 0.5 * slope * t * t


def parse_procedure(spec: str, rewind_fallback: str = "last") -> InferenceProcedure:
    """Parse ``identity``, ``bon:N``, ``won:N``, ``rewind:phi:N[:fallback]`` or ``custom:<csv>``."""
    spec = spec.strip()
    parts = spec.split(":")
    head = parts[0]
    try:
        if head == "identity" and len(parts) == 1:
            return Identity()
        if head == "bon" and len(parts) == 2:
            return BestOfN(int(parts[1]))
        if head == "won" and len(parts) == 2:
            return WorstOfN(int(parts[1]))
        if head == "rewind" and len(parts) in (3, 4):
            fallback = parts[3] if len(parts) == 4 else rewind_fallback
            return RewindRepeat(float(parts[1]), int(parts[2]), fallback)
        if head == "custom" and len(parts) >= 2:
            return read_custom_csv(":".join(parts[1:]))
    except (ValueError, InvalidParameter) as exc:
        raise ConfigError(f"bad procedure spec {spec!r}: {exc}") from None
    raise ConfigError(f"unknown procedure spec {spec!r}")


def read_custom_csv(path: str | Path) -> Custom:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(row for row in fh if not row.startswith("#")))
    except OSError as exc:
        raise ConfigError(f"cannot read custom procedure {path}: {exc}") from None
    if not rows or not {"u", "g"} <= set(rows[0]):
        raise ConfigError(f"{path}: expected columns u,g")
    return Custom(np.array([float(r["g"]) for r in rows]), name=f"custom:{path}")
