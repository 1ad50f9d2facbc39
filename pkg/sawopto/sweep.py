"""Power dependence of the modulation amplitude and strain conversions."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.linear_model import LinearRegression

from sawopto.errors import DomainError, InsufficientDataError
from sawopto.report import FitReport, input_digest
from sawopto.units import dbm_to_mw

logger = logging.getLogger(__name__)

DEFAULT_DEFORMATION_POTENTIAL = 30.0  # meV per % strain, lower bound
MIN_FIT_POINTS = 3


@dataclass(frozen=True)
class PowerSweepPoint:
    p_dbm: float
    delta_e: float
    delta_e_err: float = 0.0
    f_drive: float = 0.0

    def __post_init__(self) -> None:
        if not self.delta_e >= 0:
            raise DomainError("delta_e must be non-negative")
        if not self.delta_e_err >= 0:
            raise DomainError("delta_e_err must be non-negative")

    @property
    def p_mw(self) -> float:
        return float(dbm_to_mw(self.p_dbm))


@dataclass(frozen=True)
class StrainModel:
    d_coupling: float = DEFAULT_DEFORMATION_POTENTIAL
    strain_ref: Optional[float] = None
    p_ref_dbm: float = 0.0

    def __post_init__(self) -> None:
        if not self.d_coupling > 0:
            raise DomainError("d_coupling must be positive")
        if self.strain_ref is not None and not self.strain_ref > 0:
            raise DomainError("strain_ref must be positive")


class PowerLaw(NamedTuple):
    exponent: float
    stderr: float
    prefactor: float


@dataclass
class SqrtPFit:
    report: FitReport
    slope: float
    linear_coefficient: float
    preferred: str
    breakpoint: Optional[float]


def _sorted(points: Sequence[PowerSweepPoint]) -> List[PowerSweepPoint]:
    return sorted(points, key=lambda p: p.p_dbm)


def _weights(points: Sequence[PowerSweepPoint]) -> np.ndarray:
    errors = np.array([p.delta_e_err for p in points], dtype=float)
    if errors.size and np.all(errors > 0):
        return 1.0 / errors**2
    return np.ones(len(points))


def _through_origin(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> Tuple[float, float, float]:
    """Weighted y = k·x without intercept; returns (k, stderr, weighted rss)."""
    reg = LinearRegression(fit_intercept=False).fit(x.reshape(-1, 1), y, sample_weight=w)
    k = float(reg.coef_[0])
    rss = float(np.sum(w * (y - k * x) ** 2))
    dof = max(x.size - 1, 1)
    stderr = float(np.sqrt(rss / dof / np.sum(w * x**2)))
    return k, stderr, rss


def _plateau_rss(y: np.ndarray, w: np.ndarray) -> float:
    level = np.sum(w * y) / np.sum(w)
    return float(np.sum(w * (y - level) ** 2))


def detect_saturation(
    points: Sequence[PowerSweepPoint],
    margin: float = 0.2,
    min_plateau: int = 2,
) -> Optional[float]:
    """Power (dBm) of the last point on the √P segment, or None when ΔE does not saturate.

    Every breakpoint leaving at least ``min_plateau`` points on a constant
    plateau is tried; the split with the smallest total residual is accepted
    when it lowers the pure √P residual by at least ``margin``.
    """
    pts = _sorted(points)
    n = len(pts)
    if n < min_plateau + 1:
        return None
    x = np.sqrt([p.p_mw for p in pts])
    y = np.array([p.delta_e for p in pts])
    w = _weights(pts)

    _, _, rss_pure = _through_origin(x, y, w)
    if rss_pure <= 1e-12 * float(np.sum(w * y**2)):
        return None

    totals = []
    for k in range(n - min_plateau):
        rising = _through_origin(x[: k + 1], y[: k + 1], w[: k + 1])[2]
        totals.append(rising + _plateau_rss(y[k + 1 :], w[k + 1 :]))
    best = int(np.argmin(totals))
    logger.debug("detect_saturation: rss pure=%.6g split=%.6g at %s dBm", rss_pure, totals[best], pts[best].p_dbm)
    if totals[best] <= (1.0 - margin) * rss_pure:
        return float(pts[best].p_dbm)
    return None


def loglog_exponent(points: Sequence[PowerSweepPoint]) -> PowerLaw:
    """Slope of log ΔE against log P_mW."""
    if len(points) < 2:
        raise InsufficientDataError("need at least two points for a power law")
    p = np.array([pt.p_mw for pt in points])
    e = np.array([pt.delta_e for pt in points])
    if np.any(e <= 0) or np.any(p <= 0):
        raise DomainError("power law needs strictly positive power and delta_e")
    x, y = np.log(p), np.log(e)
    reg = LinearRegression().fit(x.reshape(-1, 1), y)
    exponent = float(reg.coef_[0])
    spread = float(np.sum((x - x.mean()) ** 2))
    if spread == 0:
        raise DomainError("power law needs at least two distinct powers")
    stderr = 0.0
    if x.size > 2:
        rss = float(np.sum((y - reg.predict(x.reshape(-1, 1))) ** 2))
        stderr = float(np.sqrt(rss / (x.size - 2) / spread))
    return PowerLaw(exponent, stderr, float(np.exp(reg.intercept_)))


def fit_sqrtp(
    points: Sequence[PowerSweepPoint],
    saturation_cut: Union[float, str, None] = "auto",
    margin: float = 0.2,
    min_plateau: int = 2,
) -> SqrtPFit:
    """Fit ΔE = s·√P_mW below the saturation cut and compare against ΔE = c·P_mW."""
    pts = _sorted(points)
    if saturation_cut == "auto":
        cut = detect_saturation(pts, margin=margin, min_plateau=min_plateau)
    elif saturation_cut is None:
        cut = None
    else:
        cut = float(saturation_cut)
    used = [p for p in pts if cut is None or p.p_dbm <= cut]
    if len(used) < MIN_FIT_POINTS:
        raise InsufficientDataError(f"need at least {MIN_FIT_POINTS} points below the cut, got {len(used)}")

    p_mw = np.array([p.p_mw for p in used])
    y = np.array([p.delta_e for p in used])
    w = _weights(used)
    slope, slope_err, rss_sqrt = _through_origin(np.sqrt(p_mw), y, w)
    linear, linear_err, rss_linear = _through_origin(p_mw, y, w)
    preferred = "sqrt" if rss_sqrt <= rss_linear else "linear"

    report = FitReport(
        model_name="power_sweep",
        residual_norm=float(np.sqrt(rss_sqrt if preferred == "sqrt" else rss_linear)),
        n_points=len(used),
        converged=True,
        input_digest=input_digest([p.p_dbm for p in pts], [p.delta_e for p in pts], [p.delta_e_err for p in pts]),
        config_snapshot={"saturation_cut": str(saturation_cut), "margin": str(margin), "min_plateau": str(min_plateau)},
    )
    report.add("slope", slope, slope_err, "meV/sqrt(mW)")
    report.add("linear_coefficient", linear, linear_err, "meV/mW")
    if len(used) >= 2 and np.all(y > 0):
        law = loglog_exponent(used)
        report.add("exponent", law.exponent, law.stderr)
    report.flags["preferred"] = preferred
    report.flags["deformation_potential_like"] = str(preferred == "sqrt").lower()
    report.flags["residual_norm_sqrt"] = format(np.sqrt(rss_sqrt), ".9g")
    report.flags["residual_norm_linear"] = format(np.sqrt(rss_linear), ".9g")
    report.flags["saturation_cut_dbm"] = "none" if cut is None else format(cut, ".9g")
    if preferred != "sqrt":
        report.warn("not deformation-potential-like: delta_e scales linearly with power")
    return SqrtPFit(report, slope, linear, preferred, cut)


def strain_to_shift(model: StrainModel, strain: float) -> float:
    if strain < 0:
        raise DomainError("strain must be non-negative")
    return model.d_coupling * strain


def shift_to_strain(model: StrainModel, shift: float) -> float:
    if shift < 0:
        raise DomainError("shift must be non-negative")
    return shift / model.d_coupling


def strain_at_power(model: StrainModel, p_dbm: float) -> float:
    """Strain amplitude at drive power p_dbm, scaling as √P from the reference."""
    if model.strain_ref is None:
        raise DomainError("strain_at_power requires a reference strain")
    return model.strain_ref * float(np.sqrt(dbm_to_mw(p_dbm) / dbm_to_mw(model.p_ref_dbm)))


def coupling_from_slope(slope: float, model: StrainModel) -> float:
    """Deformation potential implied by a fitted √P slope and the reference strain."""
    if model.strain_ref is None:
        raise DomainError("coupling_from_slope requires a reference strain")
    if not slope > 0:
        raise DomainError("slope must be positive")
    return slope * float(np.sqrt(dbm_to_mw(model.p_ref_dbm))) / model.strain_ref
