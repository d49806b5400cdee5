"""Deterministic run artifacts: CSV tables, JSON summaries, field snapshots.

Every writer is atomic (write to a temp name in the target directory, then
rename) and byte-deterministic: floats are printed with 17 significant
digits so they round-trip exactly, JSON keys are sorted, and nothing here
emits timestamps, hostnames, or other run-environment noise. The manifest
ties a run directory together: it echoes the resolved configuration and
lists every artifact with its SHA-256 checksum.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .spectral import ScalarField

CSV_COLUMNS = (
    "eps",
    "lambda",
    "peak_x",
    "peak_y",
    "rho_eps",
    "identity_ratio",
    "remainder_scaled",
    "cp_gradient_scaled",
    "farfield_scaled",
    "J_value",
)


class IntegrityError(RuntimeError):
    """An artifact is missing or does not match its manifest checksum."""


def format_float(x: float) -> str:
    # 17 significant digits round-trip any float64 exactly
    return f"{float(x):.17g}"


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(Path(path), text.encode("utf-8"))


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_csv(path: Path, header, rows) -> None:
    """Write a delimited table atomically; numeric cells get 17 digits."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if isinstance(cell, str):
                cells.append(cell)
            else:
                cells.append(format_float(cell))
        lines.append(",".join(cells))
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    """Read a numeric table written by write_csv."""
    raw = Path(path).read_text(encoding="utf-8").strip().split("\n")
    header = raw[0].split(",")
    data = np.array(
        [[float(c) for c in line.split(",")] for line in raw[1:]],
        dtype=np.float64,
    )
    if data.size and data.shape[1] != len(header):
        raise ValueError(f"ragged table in {path}")
    return header, data


def write_json(path: Path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True)
    _atomic_write_text(Path(path), text + "\n")


def read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def diagnostics_rows(records) -> list[list[float]]:
    """Flatten BlowupDiagnostics records into CSV_COLUMNS order."""
    rows = []
    for r in records:
        rows.append(
            [
                r.eps,
                r.lam,
                r.peak[0],
                r.peak[1],
                r.rho_eps,
                r.identity_ratio,
                r.remainder_scaled,
                r.cp_gradient_scaled,
                r.farfield_scaled,
                r.J_value,
            ]
        )
    return rows


def write_diagnostics_csv(path: Path, records) -> None:
    write_csv(path, CSV_COLUMNS, diagnostics_rows(records))


def write_field_snapshot(path: Path, field: ScalarField, meta: dict) -> None:
    """Raw float64 little-endian row-major dump plus a JSON sidecar.

    The sidecar (path + ".json") records the grid size and any caller
    metadata so the .bin is self-describing.
    """
    path = Path(path)
    vals = np.ascontiguousarray(field.values, dtype="<f8")
    _atomic_write_bytes(path, vals.tobytes(order="C"))
    sidecar = {"n": field.grid.n, "dtype": "<f8", "order": "C"}
    sidecar.update(meta)
    write_json(path.with_name(path.name + ".json"), sidecar)


def read_field_snapshot(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = read_json(path.with_name(path.name + ".json"))
    n = int(meta["n"])
    vals = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(n, n)
    return vals.astype(np.float64), meta


@dataclass(frozen=True)
class Manifest:
    config: dict
    artifacts: dict  # name -> {"sha256": ..., "bytes": ...}

    def verify(self, run_dir: Path) -> None:
        run_dir = Path(run_dir)
        for name, info in self.artifacts.items():
            target = run_dir / name
            if not target.is_file():
                raise IntegrityError(f"artifact missing: {name}")
            actual = sha256_file(target)
            if actual != info["sha256"]:
                raise IntegrityError(
                    f"checksum mismatch for {name}: "
                    f"manifest {info['sha256'][:12]}.., file {actual[:12]}.."
                )


def write_manifest(run_dir: Path, config: dict) -> Manifest:
    """Checksum every artifact already in run_dir and write manifest.json."""
    run_dir = Path(run_dir)
    artifacts = {}
    for entry in sorted(run_dir.iterdir()):
        if entry.name == "manifest.json" or not entry.is_file():
            continue
        artifacts[entry.name] = {
            "sha256": sha256_file(entry),
            "bytes": entry.stat().st_size,
        }
    manifest = Manifest(config=config, artifacts=artifacts)
    write_json(
        run_dir / "manifest.json",
        {"config": manifest.config, "artifacts": manifest.artifacts},
    )
    return manifest


def load_manifest(run_dir: Path) -> Manifest:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise IntegrityError(f"no manifest.json in {run_dir}")
    raw = read_json(path)
    return Manifest(config=raw["config"], artifacts=raw["artifacts"])
