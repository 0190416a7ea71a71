"""Data files: CSV/JSON with a run-manifest header on every output.

Every file starts with '# key=value' lines carrying the tool version, the
command, the scenario hash, the seed and the input paths, so any data file
can be traced to the exact configuration that produced it.  The creation
timestamp is one of those lines but is explicitly excluded from determinism
comparisons: re-running a command must reproduce every other byte.

Numbers are written with 17 significant digits ('%.17g', '.' decimal
separator, no locale dependence), which round-trips IEEE doubles exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

#: Header key whose line is excluded from byte-level determinism checks.
TIMESTAMP_KEY = "created"


@dataclass(frozen=True)
class RunManifest:
    """Provenance stamped into every output file."""

    version: str
    command: str
    config_hash: str
    seed: int
    inputs: tuple = ()
    created: str = field(default="")

    def header_lines(self):
        lines = [
            f"# vacscan={self.version}",
            f"# command={self.command}",
            f"# config_hash={self.config_hash}",
            f"# seed={self.seed}",
        ]
        for path in self.inputs:
            lines.append(f"# input={path}")
        lines.append(f"# {TIMESTAMP_KEY}={self.created}")
        return lines

    def as_dict(self):
        out = {
            "vacscan": self.version,
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            TIMESTAMP_KEY: self.created,
        }
        if self.inputs:
            out["inputs"] = list(self.inputs)
        return out


def make_manifest(command, config_hash, seed, inputs=()) -> RunManifest:
    from . import __version__
    created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return RunManifest(version=__version__, command=command,
                       config_hash=config_hash, seed=int(seed),
                       inputs=tuple(str(p) for p in inputs), created=created)


def _format(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(path, names, columns, manifest: RunManifest):
    """Write named columns (equal-length 1-D arrays) under a manifest header."""
    columns = [np.atleast_1d(np.asarray(c)) for c in columns]
    if len(names) != len(columns):
        raise ValueError("one name per column required")
    n = columns[0].shape[0]
    if any(c.shape != (n,) for c in columns):
        raise ValueError("all columns must have the same length")
    lines = manifest.header_lines()
    lines.append(",".join(names))
    for i in range(n):
        lines.append(",".join(_format(c[i]) for c in columns))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path):
    """Read a manifest-headed CSV: (meta dict, {column name: float array}).

    Repeated header keys (e.g. input=) collect into a list.
    """
    meta = {}
    names = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, value = body.split("=", 1)
                    if key in meta:
                        previous = meta[key]
                        if not isinstance(previous, list):
                            meta[key] = [previous]
                        meta[key].append(value)
                    else:
                        meta[key] = value
                continue
            if names is None:
                names = line.split(",")
                continue
            rows.append([float(x) for x in line.split(",")])
    if names is None:
        raise ValueError(f"{path} has no column header line")
    data = np.asarray(rows, dtype=float).reshape(len(rows), len(names))
    return meta, {name: data[:, i] for i, name in enumerate(names)}


def _finite(value):
    """Replace non-finite floats by None so reports stay strict JSON
    (a singular curvature matrix can make an uncertainty NaN)."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def write_json(path, payload: dict, manifest: RunManifest):
    """Write a JSON report with the manifest embedded under "manifest"."""
    document = {"manifest": manifest.as_dict()}
    document.update(payload)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_finite(document), fh, indent=2, sort_keys=True,
                  allow_nan=False)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def strip_timestamp(text: str) -> str:
    """Drop the timestamp header line — the one byte-level difference two
    identical reruns are allowed to have."""
    kept = [line for line in text.splitlines()
            if not line.startswith(f"# {TIMESTAMP_KEY}=")]
    return "\n".join(kept)
