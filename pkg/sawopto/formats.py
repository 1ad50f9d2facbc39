"""File formats: Touchstone S11, CSV tables, time tags and reports.

Parsers are strict and name the offending line; writers are deterministic
and replace the destination atomically.
"""
from __future__ import annotations

import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from sawopto.emitter import PLSpectrum, SweepMap
from sawopto.errors import DataFormatError
from sawopto.photonstats import PhotonRecord
from sawopto.report import FitReport, format_report, parse_report
from sawopto.resonator import S11Spectrum
from sawopto.sweep import PowerSweepPoint
from sawopto.units import FREQUENCY_SCALE, mev_to_nm, nm_to_mev

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DATA_FLOAT = "%.12g"
CURVE_FLOAT = "%.9g"
TIMETAG_DTYPE = np.dtype([("channel", "u1"), ("time_ps", "<u8")])
BINARY_TIMETAG_SUFFIXES = (".bin", ".ttbin")
SPECTRUM_UNITS = ("nm", "mev")


def _atomic_write(path: PathLike, payload: Union[str, bytes]) -> None:
    path = Path(path)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug("wrote %s (%d bytes)", path, len(data))


class StagedOutputs:
    """Files written to hidden siblings and moved into place together.

    Staged names keep the destination suffix so suffix-dispatched writers
    pick the same format.
    """

    def __init__(self) -> None:
        self._staged: List[Tuple[Path, Path]] = []

    def stage(self, path: PathLike, write: Callable[[Path], None]) -> None:
        path = Path(path)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.stem}.", suffix=f".staged{path.suffix}", dir=path.parent or ".")
        os.close(fd)
        self._staged.append((Path(tmp), path))
        write(Path(tmp))

    def commit(self) -> None:
        try:
            while self._staged:
                tmp, path = self._staged[0]
                os.replace(tmp, path)
                self._staged.pop(0)
        finally:
            self.discard()
        logger.debug("committed staged outputs")

    def discard(self) -> None:
        for tmp, _ in self._staged:
            if tmp.exists():
                tmp.unlink()
        self._staged = []


def _read_text(path: PathLike) -> str:
    with open(path, "r", encoding="utf-8") as handle:
        return handle.read()


def _table(
    path: PathLike,
    text: str,
    required: Sequence[str],
    optional: Sequence[str] = (),
) -> Tuple[pd.DataFrame, List[int]]:
    """Numeric CSV body with ``#`` comment lines skipped.

    Returns the frame and the physical line number of each row.
    """
    body = [
        (lineno, line)
        for lineno, line in enumerate(text.splitlines(), start=1)
        if line.strip() and not line.lstrip().startswith("#")
    ]
    if not body:
        raise DataFormatError("file is empty", path)
    header_line, header = body[0]
    columns = [name.strip() for name in header.split(",")]
    for name in required:
        if name not in columns:
            raise DataFormatError(f"missing column {name!r}", path, header_line, name)
    for lineno, line in body[1:]:
        if line.count(",") != len(columns) - 1:
            raise DataFormatError(f"expected {len(columns)} fields", path, lineno)
    if len(body) == 1:
        raise DataFormatError("no data rows", path)

    raw = pd.read_csv(io.StringIO("\n".join(line for _, line in body)), dtype=str, keep_default_na=False)
    raw.columns = columns
    wanted = [name for name in list(required) + list(optional) if name in columns]
    frame = raw[wanted].apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    bad = frame.isna().to_numpy()
    if bad.any():
        row, col = (int(i[0]) for i in np.nonzero(bad))
        raise DataFormatError(
            f"cannot parse {raw[wanted[col]].iloc[row]!r} as a number", path, body[row + 1][0], wanted[col]
        )
    return frame, [lineno for lineno, _ in body[1:]]


def _to_csv(frame: pd.DataFrame, float_format: str, preamble: str = "") -> str:
    buffer = io.StringIO()
    buffer.write(preamble)
    frame.to_csv(buffer, index=False, float_format=float_format, lineterminator="\n")
    return buffer.getvalue()


def parse_touchstone(path: PathLike) -> S11Spectrum:
    """One-port Touchstone (.s1p): Hz/kHz/MHz/GHz with RI, MA or DB data."""
    unit, fmt = "GHZ", "MA"
    seen_options = False
    freqs, values = [], []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        line = line.split("!", 1)[0].strip()
        if not line:
            continue
        if line.startswith("#"):
            if seen_options:
                raise DataFormatError("duplicate option line", path, lineno)
            seen_options = True
            parts = line[1:].upper().split()
            for token in parts:
                if token in FREQUENCY_SCALE:
                    unit = token
                elif token in ("RI", "MA", "DB"):
                    fmt = token
                elif token in ("Y", "Z", "H", "G"):
                    raise DataFormatError(f"only S parameters are supported, got {token}", path, lineno)
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise DataFormatError(f"expected 3 values for a one-port row, got {len(tokens)}", path, lineno)
        try:
            f, v1, v2 = (float(t) for t in tokens)
        except ValueError:
            raise DataFormatError(f"cannot parse {line!r}", path, lineno) from None
        freqs.append(f * FREQUENCY_SCALE[unit])
        if fmt == "RI":
            values.append(complex(v1, v2))
        elif fmt == "MA":
            values.append(v1 * np.exp(1j * np.deg2rad(v2)))
        else:
            values.append(10 ** (v1 / 20) * np.exp(1j * np.deg2rad(v2)))
    if not freqs:
        raise DataFormatError("no data rows", path)
    if not seen_options:
        logger.info("%s: no option line, assuming GHz magnitude-angle", path)
    try:
        return S11Spectrum(np.array(freqs), np.array(values))
    except ValueError as exc:
        raise DataFormatError(str(exc), path) from None


def write_touchstone(spectrum: S11Spectrum, path: PathLike) -> None:
    lines = ["! one-port reflection", "# HZ S RI R 50"]
    for f, v in zip(spectrum.frequencies, spectrum.values):
        lines.append(f"{f:.12g} {v.real:.12g} {v.imag:.12g}")
    _atomic_write(path, "\n".join(lines) + "\n")


def parse_s11_csv(path: PathLike) -> S11Spectrum:
    """Three-column reflection table ``freq_hz,re,im``."""
    frame, _ = _table(path, _read_text(path), ["freq_hz", "re", "im"])
    values = frame["re"].to_numpy(float) + 1j * frame["im"].to_numpy(float)
    try:
        return S11Spectrum(frame["freq_hz"].to_numpy(float), values)
    except ValueError as exc:
        raise DataFormatError(str(exc), path) from None


def write_s11_csv(spectrum: S11Spectrum, path: PathLike) -> None:
    frame = pd.DataFrame(
        {"freq_hz": spectrum.frequencies, "re": spectrum.values.real, "im": spectrum.values.imag}
    )
    _atomic_write(path, _to_csv(frame, DATA_FLOAT))


def read_s11(path: PathLike) -> S11Spectrum:
    if Path(path).suffix.lower() == ".csv":
        return parse_s11_csv(path)
    return parse_touchstone(path)


def _unit_header(path: PathLike, text: str) -> str:
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#") and "unit=" in stripped:
            unit = stripped.split("unit=", 1)[1].strip().lower()
            if unit not in SPECTRUM_UNITS:
                raise DataFormatError(f"unit must be one of {SPECTRUM_UNITS}, got {unit!r}", path, lineno)
            return unit
        break
    raise DataFormatError("unit header missing (expected '# unit=nm' or '# unit=mev')", path, 1)


def parse_spectrum_csv(path: PathLike) -> PLSpectrum:
    """Two-column spectrum (x, counts); x in nm or meV per the unit header."""
    text = _read_text(path)
    unit = _unit_header(path, text)
    body = [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    if not body:
        raise DataFormatError("file is empty", path)
    columns = [name.strip() for name in body[0].split(",")]
    if len(columns) != 2:
        raise DataFormatError("spectrum needs exactly two columns", path)
    frame, _ = _table(path, text, columns)
    x = frame[columns[0]].to_numpy(float)
    counts = frame[columns[1]].to_numpy(float)
    try:
        energies = nm_to_mev(x) if unit == "nm" else x
        order = np.argsort(energies, kind="stable")
        return PLSpectrum(energies[order], counts[order])
    except ValueError as exc:
        raise DataFormatError(str(exc), path) from None


def write_spectrum_csv(spectrum: PLSpectrum, path: PathLike, unit: str = "mev") -> None:
    if unit not in SPECTRUM_UNITS:
        raise DataFormatError(f"unit must be one of {SPECTRUM_UNITS}", path)
    if unit == "nm":
        frame = pd.DataFrame({"wavelength_nm": mev_to_nm(spectrum.energies)[::-1], "counts": spectrum.counts[::-1]})
    else:
        frame = pd.DataFrame({"energy_mev": spectrum.energies, "counts": spectrum.counts})
    _atomic_write(path, _to_csv(frame, DATA_FLOAT, f"# unit={unit}\n"))


def parse_sweep_csv(path: PathLike) -> List[PowerSweepPoint]:
    frame, lines = _table(path, _read_text(path), ["p_dbm", "delta_e_mev"], ["delta_e_err_mev", "f_drive_hz"])
    points = []
    for (_, row), lineno in zip(frame.iterrows(), lines):
        try:
            points.append(
                PowerSweepPoint(
                    float(row["p_dbm"]),
                    float(row["delta_e_mev"]),
                    float(row.get("delta_e_err_mev", 0.0)),
                    float(row.get("f_drive_hz", 0.0)),
                )
            )
        except ValueError as exc:
            raise DataFormatError(str(exc), path, lineno) from None
    return points


def write_sweep_csv(points: Sequence[PowerSweepPoint], path: PathLike) -> None:
    frame = pd.DataFrame(
        {
            "p_dbm": [p.p_dbm for p in points],
            "delta_e_mev": [p.delta_e for p in points],
            "delta_e_err_mev": [p.delta_e_err for p in points],
            "f_drive_hz": [p.f_drive for p in points],
        }
    )
    _atomic_write(path, _to_csv(frame, DATA_FLOAT))


def parse_timetags(path: PathLike) -> List[PhotonRecord]:
    """Binary 9-byte records (u8 channel, little-endian u64 ps) or CSV channel,time_ps."""
    path = Path(path)
    if path.suffix.lower() in BINARY_TIMETAG_SUFFIXES:
        size = path.stat().st_size
        if size % TIMETAG_DTYPE.itemsize:
            raise DataFormatError(f"size {size} is not a multiple of {TIMETAG_DTYPE.itemsize}-byte records", path)
        data = np.fromfile(path, dtype=TIMETAG_DTYPE)
        return [PhotonRecord(int(c), int(t)) for c, t in zip(data["channel"], data["time_ps"])]

    frame, lines = _table(path, _read_text(path), ["channel", "time_ps"])
    records = []
    for (_, row), lineno in zip(frame.iterrows(), lines):
        channel, time = row["channel"], row["time_ps"]
        if channel != int(channel) or time != int(time):
            raise DataFormatError("channel and time_ps must be integers", path, lineno)
        try:
            records.append(PhotonRecord(int(channel), int(time)))
        except ValueError as exc:
            raise DataFormatError(str(exc), path, lineno) from None
    return records


def write_timetags(records: Sequence[PhotonRecord], path: PathLike) -> None:
    path = Path(path)
    if path.suffix.lower() in BINARY_TIMETAG_SUFFIXES:
        data = np.zeros(len(records), dtype=TIMETAG_DTYPE)
        data["channel"] = [r.channel for r in records]
        data["time_ps"] = [r.time for r in records]
        _atomic_write(path, data.tobytes())
        return
    frame = pd.DataFrame({"channel": [r.channel for r in records], "time_ps": [r.time for r in records]})
    _atomic_write(path, _to_csv(frame, DATA_FLOAT))


def parse_histogram_csv(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """(edges, counts) from contiguous ``bin_start_ps,bin_end_ps,count`` rows."""
    frame, lines = _table(path, _read_text(path), ["bin_start_ps", "bin_end_ps", "count"])
    start = frame["bin_start_ps"].to_numpy(float)
    end = frame["bin_end_ps"].to_numpy(float)
    counts = frame["count"].to_numpy(float)
    for i in range(start.size):
        if not end[i] > start[i]:
            raise DataFormatError("bin_end_ps must exceed bin_start_ps", path, lines[i])
        if i and not np.isclose(start[i], end[i - 1], rtol=1e-9, atol=0.0):
            raise DataFormatError("bins must be contiguous", path, lines[i])
        if counts[i] < 0:
            raise DataFormatError("counts must be non-negative", path, lines[i], "count")
    return np.append(start, end[-1]), counts


def write_histogram_csv(edges: np.ndarray, counts: np.ndarray, path: PathLike) -> None:
    edges = np.asarray(edges, dtype=float)
    frame = pd.DataFrame({"bin_start_ps": edges[:-1], "bin_end_ps": edges[1:], "count": np.asarray(counts)})
    _atomic_write(path, _to_csv(frame, DATA_FLOAT))


def parse_sweep_map_csv(path: PathLike) -> SweepMap:
    """Energy column followed by one column per drive frequency (header in Hz)."""
    text = _read_text(path)
    body = [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    if not body:
        raise DataFormatError("file is empty", path)
    columns = [name.strip() for name in body[0].split(",")]
    if len(columns) < 2 or columns[0] != "energy_mev":
        raise DataFormatError("first column must be energy_mev followed by drive frequencies", path)
    try:
        drive = np.array([float(name) for name in columns[1:]])
    except ValueError:
        raise DataFormatError("drive frequency headers must be numbers in Hz", path) from None
    frame, _ = _table(path, text, columns)
    try:
        return SweepMap(frame["energy_mev"].to_numpy(float), drive, frame[columns[1:]].to_numpy(float))
    except ValueError as exc:
        raise DataFormatError(str(exc), path) from None


def write_sweep_map_csv(smap: SweepMap, path: PathLike) -> None:
    frame = pd.DataFrame(smap.counts, columns=[format(f, ".12g") for f in smap.drive_frequencies])
    frame.insert(0, "energy_mev", smap.energies)
    _atomic_write(path, _to_csv(frame, DATA_FLOAT))


def emit_report(report: FitReport, path: PathLike) -> None:
    _atomic_write(path, format_report(report))


def read_report(path: PathLike) -> FitReport:
    return parse_report(_read_text(path), source=path)


def emit_curve(table: Union[pd.DataFrame, Mapping[str, Sequence[float]]], path: PathLike) -> None:
    """Plot-ready CSV: one header line, one line per row, 9 significant digits."""
    frame = table if isinstance(table, pd.DataFrame) else pd.DataFrame(dict(table))
    _atomic_write(path, _to_csv(frame, CURVE_FLOAT))


def read_curve(path: PathLike) -> Dict[str, np.ndarray]:
    frame = pd.read_csv(path)
    return {name: frame[name].to_numpy() for name in frame.columns}
