"""Run directories and manifests."""

from __future__ import annotations

import datetime as _dt
import platform
import sys
from pathlib import Path

import numpy as np

from .. import __version__

MANIFEST = "manifest.txt"


def make_run_dir(root, seed, command, now=None):
    """Create ``root/<YYYYmmdd-HHMMSS>-<command>-seed<seed>`` (suffixed if it already exists)."""
    root = Path(root)
    stamp = (now or _dt.datetime.now()).strftime("%Y%m%d-%H%M%S")
    base = f"{stamp}-{command}-seed{seed}"
    try:
        root.mkdir(parents=True, exist_ok=True)
        path = root / base
        k = 1
        while path.exists():
            path = root / f"{base}-{k}"
            k += 1
        path.mkdir()
    except OSError as exc:
        raise OSError(f"cannot create run directory under {root}: {exc.strerror}") from exc
    return path


def write_manifest(run_dir, entries):
    """Flat ``key=value`` manifest; enough to regenerate the run from config and seed."""
    info = {
        "package_version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
    }
    info.update(entries)
    lines = [f"{k}={_flat(v)}" for k, v in info.items()]
    path = Path(run_dir) / MANIFEST
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _flat(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out
