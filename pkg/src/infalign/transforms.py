"""Reward transformations applied on top of calibrated scores.

Every transform maps ``[0, 1]`` to finite reals and is vectorised over numpy
arrays.  ``for_beta`` lets callers treat fixed transforms and per-beta
families (see :mod:`infalign.fixedpoint`) uniformly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, InvalidParameter

DEFAULT_LOG_EPSILON = 1e-6
DEFAULT_TABLE_SIZE = 2001


class Transform:
    label: str = "transform"

    def __call__(self, u):
        raise NotImplementedError

    def for_beta(self, beta: float) -> "Transform":
        return self


@dataclass(frozen=True)
class Identity(Transform):
    @property
    def label(self) -> str:
        return "identity"

    def __call__(self, u):
        return np.asarray(u, dtype=float) * 1.0


@dataclass(frozen=True)
class Constant(Transform):
    value: float = 0.0

    @property
    def label(self) -> str:
        return f"const:{self.value!r}"

    def __call__(self, u):
        return np.full(np.shape(u), float(self.value))


@dataclass(frozen=True)
class Log(Transform):
    # log(0) is -inf; the clamp keeps tabulated grids (which include u=0) finite
    epsilon: float = DEFAULT_LOG_EPSILON

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise InvalidParameter(f"log clamp must lie in (0, 1), got {self.epsilon!r}")

    @property
    def label(self) -> str:
        if self.epsilon == DEFAULT_LOG_EPSILON:
            return "log"
        return f"log:{self.epsilon!r}"

    def __call__(self, u):
        return np.log(np.maximum(np.asarray(u, dtype=float), self.epsilon))


@dataclass(frozen=True)
class ExpTilt(Transform):
    """``sign(t) * exp(t * u)`` with ``sign(0) = +1``; increasing for every t != 0."""

    t: float

    @property
    def label(self) -> str:
        t = float(self.t)
        return f"exp:{int(t)}" if t.is_integer() else f"exp:{t!r}"

    def __call__(self, u):
        sign = 1.0 if self.t >= 0 else -1.0
        return sign * np.exp(self.t * np.asarray(u, dtype=float))


@dataclass(frozen=True, eq=False)
class Tabulated(Transform):
    """Piecewise-linear transform through values on a uniform grid over [0, 1]."""

    values: np.ndarray
    name: str = "table"
    grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise InvalidParameter("a tabulated transform needs at least 2 grid values")
        if not np.all(np.isfinite(values)):
            raise InvalidParameter("tabulated transform values must be finite")
        values.setflags(write=False)
        grid = np.linspace(0.0, 1.0, values.size)
        grid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "grid", grid)

    @property
    def label(self) -> str:
        return self.name

    def __call__(self, u):
        return np.interp(np.asarray(u, dtype=float), self.grid, self.values)

    def __eq__(self, other):
        return (
            isinstance(other, Tabulated)
            and self.name == other.name
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.name, self.values.tobytes()))


def evaluate(transform: Transform, u):
    """Evaluate ``transform`` at ``u``, rejecting points outside [0, 1]."""
    arr = np.asarray(u, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"transform argument outside [0, 1]: {u!r}")
    out = transform(arr)
    return float(out) if np.ndim(out) == 0 else out


def compose(transform: Transform, score: float) -> float:
    """Transformed reward ``Phi(C)`` for a calibrated score ``C``."""
    return evaluate(transform, score)


def tabulate(transform: Transform, size: int = DEFAULT_TABLE_SIZE, name: str | None = None) -> Tabulated:
    grid = np.linspace(0.0, 1.0, size)
    return Tabulated(transform(grid), name=name or transform.label)


def read_table_csv(path: str | Path) -> Tabulated:
    """Load a ``u,phi`` CSV written by :func:`write_table_csv`."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        if reader.fieldnames is None or not {"u", "phi"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: expected columns u,phi")
        rows = [(float(r["u"]), float(r["phi"])) for r in reader]
    if len(rows) < 2:
        raise ConfigError(f"{path}: need at least two rows")
    u = np.array([r[0] for r in rows])
    expected = np.linspace(0.0, 1.0, u.size)
    if not np.allclose(u, expected, rtol=0, atol=1e-12):
        raise ConfigError(f"{path}: u column must be a uniform grid on [0, 1]")
    return Tabulated(np.array([r[1] for r in rows]), name=f"table:{path}")


def format_table_csv(values, metadata: dict | None = None) -> str:
    """``u,phi`` CSV text with optional ``# key=value`` header lines."""
    values = np.asarray(values, dtype=float)
    grid = np.linspace(0.0, 1.0, values.size)
    buf = io.StringIO()
    for key, val in (metadata or {}).items():
        buf.write(f"# {key}={val}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["u", "phi"])
    for u, phi in zip(grid, values):
        writer.writerow([repr(float(u)), repr(float(phi))])
    return buf.getvalue()


def write_table_csv(path: str | Path, values, metadata: dict | None = None) -> None:
    Path(path).write_text(format_table_csv(values, metadata), encoding="utf-8")


def parse_transform(spec: str) -> Transform:
    """Parse ``identity``, ``log[:eps]``, ``exp:<t>``, ``const:<c>`` or ``table:<path>``."""
    spec = spec.strip()
    head, _, arg = spec.partition(":")
    try:
        if head == "identity" and not arg:
            return Identity()
        if head == "log":
            return Log(float(arg)) if arg else Log()
        if head == "exp" and arg:
            return ExpTilt(float(arg))
        if head == "const":
            return Constant(float(arg) if arg else 0.0)
        if head == "table" and arg:
            return read_table_csv(arg)
    except ValueError as exc:
        raise ConfigError(f"bad transform spec {spec!r}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read transform table {arg!r}: {exc}") from None
    raise ConfigError(f"unknown transform spec {spec!r}")


def is_nondecreasing(transform: Transform, points: int = 10_000) -> bool:
    vals = transform(np.linspace(0.0, 1.0, points))
    return bool(np.all(np.diff(vals) >= 0.0)) and math.isfinite(float(np.max(np.abs(vals))))
