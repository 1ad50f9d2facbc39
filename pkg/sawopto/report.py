"""Structured fit reports.

A report is human-readable text made of ``key: value`` lines grouped in
``[section]`` blocks with a stable field order, so identical inputs give
byte-identical files.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from sawopto.errors import DataFormatError

logger = logging.getLogger(__name__)

REPORT_DIGITS = 9


@dataclass(frozen=True)
class ParameterEstimate:
    value: float
    stderr: float = 0.0
    unit: str = ""

    def __post_init__(self) -> None:
        if not (self.stderr >= 0 or math.isnan(self.stderr)):
            raise ValueError("standard error must be non-negative")


@dataclass
class FitReport:
    model_name: str
    parameters: Dict[str, ParameterEstimate] = field(default_factory=dict)
    residual_norm: float = 0.0
    n_points: int = 0
    converged: bool = True
    warnings: List[str] = field(default_factory=list)
    input_digest: str = ""
    config_snapshot: Dict[str, str] = field(default_factory=dict)
    flags: Dict[str, str] = field(default_factory=dict)

    def add(self, name: str, value: float, stderr: Optional[float] = 0.0, unit: str = "") -> None:
        if stderr is None or not np.isfinite(stderr):
            self.warn(f"{name}: uncertainty unavailable")
            stderr = 0.0
        self.parameters[name] = ParameterEstimate(float(value), abs(float(stderr)), unit)

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    def value(self, name: str) -> float:
        return self.parameters[name].value

    def stderr(self, name: str) -> float:
        return self.parameters[name].stderr


def input_digest(*arrays: Iterable) -> str:
    digest = hashlib.sha256()
    for item in arrays:
        data = np.ascontiguousarray(np.asarray(item))
        if np.iscomplexobj(data):
            data = np.ascontiguousarray(np.stack([data.real, data.imag]).astype(float))
        elif data.dtype.kind in "biuf":
            data = data.astype(float)
        digest.update(str(data.shape).encode())
        digest.update(data.tobytes())
    return digest.hexdigest()


def format_number(value: float) -> str:
    return format(float(value), f".{REPORT_DIGITS}g")


def format_report(report: FitReport) -> str:
    lines = [
        f"model: {report.model_name}",
        f"converged: {str(report.converged).lower()}",
        f"n_points: {report.n_points}",
        f"residual_norm: {format_number(report.residual_norm)}",
        f"input_digest: {report.input_digest}",
        "[parameters]",
    ]
    for name, est in report.parameters.items():
        lines.append(
            f"{name}: value={format_number(est.value)} stderr={format_number(est.stderr)} unit={est.unit or '-'}"
        )
    lines.append("[flags]")
    for key, value in report.flags.items():
        lines.append(f"{key}: {value}")
    lines.append("[warnings]")
    lines.extend(f"- {message}" for message in report.warnings)
    lines.append("[config]")
    for key, value in report.config_snapshot.items():
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def parse_report(text: str, source: Union[str, Path, None] = None) -> FitReport:
    header: Dict[str, str] = {}
    report = FitReport(model_name="")
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        if section == "warnings":
            if not line.startswith("- "):
                raise DataFormatError("warning lines must start with '- '", source, lineno)
            report.warnings.append(line[2:])
            continue
        if ": " not in line:
            raise DataFormatError("expected 'key: value'", source, lineno)
        key, value = line.split(": ", 1)
        if section is None:
            header[key] = value
        elif section == "parameters":
            parts = dict(token.split("=", 1) for token in value.split(" "))
            unit = parts.get("unit", "-")
            report.parameters[key] = ParameterEstimate(
                float(parts["value"]), float(parts["stderr"]), "" if unit == "-" else unit
            )
        elif section == "flags":
            report.flags[key] = value
        elif section == "config":
            report.config_snapshot[key] = value
        else:
            raise DataFormatError(f"unknown section {section!r}", source, lineno)
    try:
        report.model_name = header["model"]
        report.converged = header["converged"] == "true"
        report.n_points = int(header["n_points"])
        report.residual_norm = float(header["residual_norm"])
        report.input_digest = header.get("input_digest", "")
    except KeyError as exc:
        raise DataFormatError(f"missing header field {exc.args[0]!r}", source) from None
    return report
