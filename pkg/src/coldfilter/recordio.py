"""Record, spectrum and curve file I/O.

Record files are self-describing: a magic string, a little-endian uint32
header length, a JSON header (dt, n_samples, seed, scenario_id, format
version) and the raw little-endian float64 payload.  CSV output is tidy (one
observation per row, header row) with floats written to 17 significant
digits so files can be re-compared bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .oscillator import MeasurementRecord, SimGrid, Spectrum

__all__ = [
    "write_record",
    "read_record",
    "write_record_csv",
    "write_csv",
    "write_spectrum_csv",
    "FORMAT_VERSION",
]

_MAGIC = b"CFREC01\n"
FORMAT_VERSION = 1


def write_record(path: str | Path, record: MeasurementRecord) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "dt": record.grid.dt,
        "n_samples": record.grid.n_samples,
        "seed": int(record.seed),
        "scenario_id": record.scenario_id,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.asarray(record.samples, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_record(path: str | Path) -> MeasurementRecord:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ConfigError(f"{path}: not a coldfilter record file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n = int(header["n_samples"])
        payload = fh.read(8 * n)
        if len(payload) != 8 * n:
            raise ConfigError(f"{path}: truncated payload")
        samples = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    grid = SimGrid(dt=float(header["dt"]), n_samples=n)
    return MeasurementRecord(samples=samples, grid=grid, seed=int(header["seed"]),
                             scenario_id=str(header.get("scenario_id", "")))


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ConfigError("row length does not match the header")
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_record_csv(path: str | Path, record: MeasurementRecord) -> None:
    t = record.grid.times()
    write_csv(path, ["time_s", "displacement_m"], zip(t, record.samples))


def write_spectrum_csv(path: str | Path, spectrum: Spectrum,
                       extra: dict | None = None) -> None:
    """Spectrum rows with optional constant annotation columns."""
    extra = extra or {}
    header = ["omega_rad_s", "psd"] + list(extra.keys())
    const = list(extra.values())
    rows = ([w, p] + const for w, p in zip(spectrum.freqs, spectrum.psd))
    write_csv(path, header, rows)
