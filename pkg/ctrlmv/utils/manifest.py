"""JSON run manifest: configuration echo plus a content hash of the inputs."""

import hashlib
import json
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import numpy as np

from ctrlmv import __version__


def content_hash(config: Mapping[str, Any], inputs: Iterable[Path] = ()) -> str:
    """sha256 over the canonical config JSON followed by each input file's bytes."""
    digest = hashlib.sha256()
    digest.update(json.dumps(config, sort_keys=True, default=_jsonable).encode("utf-8"))
    for path in sorted(Path(p) for p in inputs):
        digest.update(path.name.encode("utf-8"))
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 16), b""):
                digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    out_dir: Path,
    command: str,
    config: Mapping[str, Any],
    inputs: Iterable[Path] = (),
    results: Optional[Mapping[str, Any]] = None,
) -> Path:
    inputs = [Path(p) for p in inputs]
    manifest = {
        "command": command,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "python": platform.python_version(),
        "config": config,
        "inputs": [str(p) for p in inputs],
        "content_hash": content_hash(config, inputs),
        "results": dict(results or {}),
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, default=_jsonable)
    return path


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)
