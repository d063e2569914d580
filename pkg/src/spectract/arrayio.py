"""Self-describing on-disk array format and run manifests.

An array is a little-endian float32 row-major payload `<name>.f32` next to a
JSON sidecar `<name>.json` carrying shape, dtype, axis labels, units, creator
and seed. The format is deliberately trivial so every artifact stays
auditable with a hex editor.
"""

from __future__ import annotations

import json
import os
import subprocess
import time

import numpy as np


class IntegrityError(RuntimeError):
    pass


def _sidecar(path: str) -> str:
    base, _ = os.path.splitext(path)
    return base + ".json"


def save_array(path: str, array: np.ndarray, axes=None, units="",
               creator="spectract", seed=None) -> None:
    """Write the f32 payload and its JSON sidecar."""
    if not path.endswith(".f32"):
        path = path + ".f32"
    array = np.asarray(array)
    payload = np.ascontiguousarray(array, dtype="<f4")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(payload.tobytes())
    sidecar = {
        "shape": list(array.shape),
        "dtype": "f32",
        "axes": list(axes) if axes else ["dim%d" % i for i in range(array.ndim)],
        "units": units,
        "creator": creator,
        "seed": seed,
    }
    with open(_sidecar(path), "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def load_array(path: str):
    """Read an array pair; returns (array, sidecar dict)."""
    if not path.endswith(".f32"):
        path = path + ".f32"
    with open(_sidecar(path)) as f:
        meta = json.load(f)
    if meta.get("dtype") != "f32":
        raise IntegrityError(f"unsupported dtype {meta.get('dtype')!r}")
    shape = tuple(meta["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    raw = open(path, "rb").read()
    if len(raw) != expected:
        raise IntegrityError(
            f"payload is {len(raw)} bytes, sidecar implies {expected}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return arr.astype(np.float64), meta


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(out_dir: str, command: list, seeds=None, configs=None) -> str:
    """Record how an artifact directory was produced."""
    manifest = {
        "command": list(command),
        "config_paths": list(configs) if configs else [],
        "seeds": seeds if seeds is not None else {},
        "git_describe": git_describe(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return path


def read_manifest(path: str) -> dict:
    with open(path) as f:
        return json.load(f)
