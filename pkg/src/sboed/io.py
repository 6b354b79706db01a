"""Flat little-endian float64 arrays with JSON sidecars, plus hashing helpers."""
from __future__ import annotations

import hashlib
import json
import subprocess
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import ContractError

__all__ = [
    "save_array",
    "load_array",
    "save_field",
    "array_hash",
    "json_hash",
    "write_json",
    "read_json",
    "build_id",
]

DTYPE = "<f8"


def _with(stem: Path, suffix: str) -> Path:
    # append rather than replace: stems such as "net.params" carry dots
    return Path(str(stem) + suffix)


def array_hash(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a, dtype=DTYPE)
    h = hashlib.sha256(a.tobytes())
    h.update(repr(a.shape).encode())
    return h.hexdigest()


def json_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def write_json(path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def read_json(path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ContractError(f"missing file {path}") from exc


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def save_array(stem, arr: np.ndarray, **meta) -> str:
    """Write ``stem.bin`` and ``stem.json``; returns the content hash."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    a = np.ascontiguousarray(arr, dtype=DTYPE)
    a.tofile(_with(stem, ".bin"))
    digest = array_hash(a)
    sidecar = {"shape": list(a.shape), "dtype": DTYPE, "sha256": digest, **meta}
    write_json(_with(stem, ".json"), sidecar)
    return digest


def load_array(stem, expect_hash: Optional[str] = None):
    """Read an array written by :func:`save_array`; returns ``(array, sidecar)``."""
    stem = Path(stem)
    meta = read_json(_with(stem, ".json"))
    try:
        a = np.fromfile(_with(stem, ".bin"), dtype=DTYPE)
    except FileNotFoundError as exc:
        raise ContractError(f"missing file {_with(stem, '.bin')}") from exc
    shape = tuple(meta["shape"])
    if a.size != int(np.prod(shape)):
        raise ContractError(f"{stem}.bin holds {a.size} values, sidecar expects shape {shape}")
    a = a.reshape(shape)
    digest = array_hash(a)
    if digest != meta["sha256"] or (expect_hash is not None and digest != expect_hash):
        raise ContractError(f"hash mismatch for {stem}.bin; upstream artifact changed")
    return a, meta


def save_field(stem, field: np.ndarray, grid, field_name: str) -> str:
    """Scalar field on the active nodes, with the grid description in the sidecar."""
    d = grid.describe()
    return save_array(stem, field, nx=d["nx"], ny=d["ny"], lx=d["lx"], ly=d["ly"], field_name=field_name)


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__

    return f"v{__version__}"
