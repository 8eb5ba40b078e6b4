"""Run manifests: enough to reproduce a command, hashed for idempotence audits.

A manifest records the command, the fully resolved config, the seeds, input
file hashes, and hashes of the tabular outputs (CSV/JSON). Raster outputs
are listed but not hashed: their bytes may differ across platforms within
the documented float tolerance. Manifests carry no timestamps, so identical
runs produce identical manifests.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__

_HASHED_SUFFIXES = {".csv", ".json", ".geojson"}


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir, command: str, config_data: dict,
                       inputs: list, outputs: list) -> Path:
    """Write manifests/<command>.json under out_dir and return its path."""
    out_dir = Path(out_dir)
    manifest_dir = out_dir / "manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "package_version": __version__,
        "config": config_data,
        "inputs": {str(p): file_sha256(p) for p in sorted(map(str, inputs))
                   if Path(p).exists()},
        "outputs": {},
    }
    for p in sorted(map(str, outputs)):
        path = Path(p)
        if not path.exists():
            continue
        if path.suffix.lower() in _HASHED_SUFFIXES:
            doc["outputs"][str(p)] = file_sha256(path)
        else:
            doc["outputs"][str(p)] = f"size:{path.stat().st_size}"
    target = manifest_dir / f"{command.replace(' ', '_')}.json"
    target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return target
