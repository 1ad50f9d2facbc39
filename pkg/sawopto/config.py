from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union, get_type_hints

from sawopto.errors import ConfigError

ENV_PREFIX = "SAWOPTO_"
# Only these keys may come from the environment.
ENV_KEYS = ("seed", "threads")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _optional(env: Mapping[str, str], key: str) -> Optional[str]:
    value = env.get(key)
    if value is None:
        return None
    value = value.strip()
    return value or None


def _coerce(key: str, raw: Any, kind: type) -> Any:
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, kind):
            return raw
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(raw).__name__}")
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    return text


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0  # Philox seed for every simulation
    threads: int = 1  # joblib workers; results do not depend on it

    s11_window_linewidths: float = 5.0  # per-mode fit half-window, in loaded linewidths
    s11_max_iterations: int = 200  # per varied parameter
    s11_tolerance: float = 1e-8  # leastsq xtol and ftol
    s11_dip_prominence: float = 0.05  # |S11| dip prominence for seeding modes
    s11_background: bool = False  # fit a complex linear background
    s11_min_improvement: float = 0.5  # residual drop a mode must give to count as found
    coupling_tolerance: float = 1e-3  # |q_e - q_i| / (q_e + q_i) for critical coupling

    quadrature_samples: int = 512  # phase samples in the time average
    lineshape_background: str = "constant"  # constant or linear
    lineshape_model_margin: float = 0.05  # chi-square gain needed to prefer the modulated model
    spectrum_unit: str = "mev"  # sim-spectrum output and fit curve axis: mev or nm

    strobe_bins: int = 128  # bins per SAW period
    strobe_pulses: int = 1_000_000
    strobe_pulse_period_ps: float = 12_500.0  # 80 MHz laser
    strobe_lifetime_ps: float = 2_000.0
    strobe_excitation: str = "cw"  # cw (random phase) or pulsed
    strobe_jitter_ps: float = 0.0  # detector jitter sigma; 0 is off
    strobe_chunk_pulses: int = 100_000  # pulses per seeded substream
    filter_edge_width_mev: float = 0.0  # raised-cosine edge width; 0 is ideal
    filter_unit: str = "mev"  # unit of --filter edges: mev or nm

    g2_window_ps: float = 50_000.0  # half-range of delays
    g2_bin_width_ps: float = 500.0
    g2_wing_fraction: float = 0.8  # far wing starts at this fraction of the window
    g2_normalization_tolerance: float = 0.1  # allowed far-wing deviation from 1
    lifetime_start_offset: int = 2  # bins after the peak where the decay fit starts

    saturation_margin: float = 0.2  # residual drop needed to accept a plateau
    saturation_min_plateau: int = 2  # points on the plateau
    deformation_potential_mev_per_percent: float = 30.0  # lower bound
    strain_ref_percent: float = 0.0119  # strain at strain_ref_dbm
    strain_ref_dbm: float = 0.0

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.quadrature_samples < 8:
            raise ConfigError("quadrature_samples must be >= 8")
        if self.strobe_bins < 8:
            raise ConfigError("strobe_bins must be >= 8")
        if self.lineshape_background not in ("constant", "linear"):
            raise ConfigError("lineshape_background must be 'constant' or 'linear'")
        if self.strobe_excitation not in ("cw", "pulsed"):
            raise ConfigError("strobe_excitation must be 'cw' or 'pulsed'")
        for key in ("spectrum_unit", "filter_unit"):
            if getattr(self, key) not in ("mev", "nm"):
                raise ConfigError(f"{key} must be 'mev' or 'nm'")

    @classmethod
    def keys(cls) -> Dict[str, type]:
        hints = get_type_hints(cls)
        return {f.name: hints[f.name] for f in fields(cls)}

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        kinds = cls.keys()
        values: Dict[str, Any] = {}
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            content = line.split("#", 1)[0].strip()
            if not content:
                continue
            if "=" not in content:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in content.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw, kinds[key])
        return cls(**values)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        kinds = self.keys()
        changes: Dict[str, Any] = {}
        for key, raw in overrides.items():
            if raw is None:
                continue
            if key not in kinds:
                raise ConfigError(f"unknown key {key!r}")
            changes[key] = _coerce(key, raw, kinds[key])
        return replace(self, **changes) if changes else self

    def apply_env(self, environ: Optional[Mapping[str, str]] = None) -> "RunConfig":
        env = os.environ if environ is None else environ
        overrides = {key: _optional(env, ENV_PREFIX + key.upper()) for key in ENV_KEYS}
        return self.with_overrides(overrides)

    def snapshot(self) -> Dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def load(
        cls,
        path: Optional[Union[str, Path]] = None,
        environ: Optional[Mapping[str, str]] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> "RunConfig":
        """File, then environment (seed/threads only), then CLI flags."""
        cfg = cls.from_file(path) if path else cls()
        cfg = cfg.apply_env(environ)
        return cfg.with_overrides(overrides or {})
