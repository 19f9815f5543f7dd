"""Sweep configuration: YAML file, defaults, and spec-string resolution."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .analytic import DEFAULT_GRID, _check_grid
from .errors import ConfigError, InfAlignError
from .fixedpoint import parse_family
from .mc_oracle import DEFAULT_TRIALS
from .procedures import REWIND_FALLBACKS, InferenceProcedure, parse_procedure
from .transforms import Transform, parse_transform

DEFAULT_TRANSFORMS = ("identity", "log", "exp:5", "exp:10", "exp:-5", "exp:-10")
DEFAULT_PROCEDURES = ("bon:4",)
DEFAULT_BETA_RANGE = (0.02, 5.0, 16)


@dataclass(frozen=True)
class SweepConfig:
    transforms: tuple[str, ...] = DEFAULT_TRANSFORMS
    procedures: tuple[str, ...] = DEFAULT_PROCEDURES
    betas: tuple[float, ...] | None = None
    beta_range: tuple[float, float, int] = DEFAULT_BETA_RANGE
    kl_targets: tuple[float, ...] | None = None
    grid: int = DEFAULT_GRID
    trials: int = DEFAULT_TRIALS
    seed: int = 0
    rewind_fallback: str = "last"
    out: str = "out"
    png: bool = False
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if not self.transforms:
            raise ConfigError("at least one transform is required")
        if not self.procedures:
            raise ConfigError("at least one procedure is required")
        if self.betas is not None:
            if not self.betas:
                raise ConfigError("betas must not be empty")
            if any(not (b > 0 and math.isfinite(b)) for b in self.betas):
                raise ConfigError("betas must be positive and finite")
        lo, hi, count = self.beta_range
        if not (0 < lo <= hi and math.isfinite(hi)) or int(count) != count or count < 1:
            raise ConfigError("beta_range must be (min > 0, max >= min, count >= 1)")
        if self.kl_targets is not None and (not self.kl_targets or any(k <= 0 for k in self.kl_targets)):
            raise ConfigError("kl_targets must be positive")
        try:
            _check_grid(self.grid)
        except InfAlignError as exc:
            raise ConfigError(str(exc)) from None
        if int(self.trials) != self.trials or self.trials < 1:
            raise ConfigError("trials must be a positive integer")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.rewind_fallback not in REWIND_FALLBACKS:
            raise ConfigError(f"rewind_fallback must be one of {REWIND_FALLBACKS}")

    def beta_values(self) -> list[float]:
        if self.betas is not None:
            return sorted(float(b) for b in self.betas)
        lo, hi, count = self.beta_range
        if count == 1:
            return [float(lo)]
        return [float(b) for b in np.geomspace(lo, hi, int(count))]

    def resolved_transforms(self) -> list[Transform]:
        return [resolve_transform(s, self.grid, self.base_dir) for s in self.transforms]

    def resolved_procedures(self) -> list[InferenceProcedure]:
        out = []
        for spec in self.procedures:
            try:
                spec = _rebase_path(spec, "custom:", self.base_dir)
                out.append(parse_procedure(spec, self.rewind_fallback))
            except ConfigError:
                raise
            except (InfAlignError, ValueError, OSError) as exc:
                raise ConfigError(f"bad procedure spec {spec!r}: {exc}") from None
        return out

    def validate_specs(self) -> None:
        """Resolve every spec once so errors surface before any computation."""
        for spec in self.transforms:
            if not spec.startswith(("bon_fp:", "won_fp:")):
                resolve_transform(spec, self.grid, self.base_dir)
            else:
                parse_family(spec, self.grid)
        self.resolved_procedures()

    def to_dict(self) -> dict:
        # where results land is not part of the run's identity
        d = asdict(self)
        d.pop("base_dir")
        d.pop("out")
        d["beta_values"] = self.beta_values()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def with_overrides(self, **kw) -> "SweepConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


def _rebase_path(spec: str, prefix: str, base_dir: str) -> str:
    if spec.startswith(prefix):
        path = Path(spec[len(prefix):])
        if not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            raise ConfigError(f"file referenced by {spec!r} does not exist")
        return prefix + str(path)
    return spec


def resolve_transform(spec: str, M: int = DEFAULT_GRID, base_dir: str = ".") -> Transform:
    """Transform specs plus the fixed-point families ``bon_fp:N`` and ``won_fp:N``."""
    spec = spec.strip()
    if spec.startswith(("bon_fp:", "won_fp:")):
        return parse_family(spec, M)
    spec = _rebase_path(spec, "table:", base_dir)
    try:
        return parse_transform(spec)
    except ConfigError:
        raise
    except (InfAlignError, ValueError, OSError) as exc:
        raise ConfigError(f"bad transform spec {spec!r}: {exc}") from None


_KEYS = {f for f in SweepConfig.__dataclass_fields__ if f != "base_dir"}


def _as_tuple(value, key, kind):
    if isinstance(value, (str, int, float)):
        value = [value]
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{key} must be a list")
    try:
        return tuple(kind(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} has an entry of the wrong type") from None


def config_from_dict(data: dict, base_dir: str = ".") -> SweepConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - _KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kw: dict = {"base_dir": base_dir}
    for key in ("transforms", "procedures"):
        if key in data:
            kw[key] = _as_tuple(data[key], key, str)
    for key in ("betas", "kl_targets"):
        if data.get(key) is not None:
            kw[key] = _as_tuple(data[key], key, float)
    if "beta_range" in data:
        br = data["beta_range"]
        if isinstance(br, dict):
            br = [br.get("min"), br.get("max"), br.get("count")]
        if not isinstance(br, (list, tuple)) or len(br) != 3:
            raise ConfigError("beta_range must be [min, max, count]")
        try:
            kw["beta_range"] = (float(br[0]), float(br[1]), int(br[2]))
        except (TypeError, ValueError):
            raise ConfigError("beta_range must be [min, max, count]") from None
    for key, kind in (("grid", int), ("trials", int), ("seed", int), ("rewind_fallback", str),
                      ("out", str), ("png", bool)):
        if key in data:
            value = data[key]
            if kind is int and isinstance(value, str):
                # YAML 1.1 reads 1e6 as a string
                try:
                    value = float(value)
                except ValueError:
                    pass
            if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
                # allow 1e6-style floats that are whole numbers
                if isinstance(value, float) and value.is_integer():
                    value = int(value)
                else:
                    raise ConfigError(f"{key} must be an integer")
            if kind is bool and not isinstance(value, bool):
                raise ConfigError(f"{key} must be true or false")
            kw[key] = kind(value)
    return SweepConfig(**kw)


def load_config(path: str | Path | None) -> SweepConfig:
    if path is None:
        return SweepConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, str(path.parent))
