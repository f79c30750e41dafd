"""Atomic file output, JSON helpers and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def write_json(path, obj) -> None:
    atomic_write_bytes(Path(path), dumps(obj).encode())


def read_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, args: dict, inputs: list, outputs: list) -> dict:
    """Record inputs, outputs (with hashes) and library versions; no timestamps
    so identical runs produce identical manifests."""
    from moetrim import __version__

    manifest = {
        "command": command,
        "args": {k: v for k, v in sorted(args.items()) if k != "func"},
        "inputs": {str(p): sha256_file(p) for p in inputs if p and Path(p).is_file()},
        "outputs": {str(p): sha256_file(p) for p in outputs if Path(p).is_file()},
        "versions": {"moetrim": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    write_json(path, manifest)
    return manifest
