"""Atomic file writes and the run manifest."""
from __future__ import annotations

import json
import os
import platform
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__


def atomic_write(path: str | Path, data: bytes | str) -> Path:
    """Write to a temporary file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path: str | Path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=1, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def versions() -> dict:
    return {"package": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__}


def stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class RunManifest:
    config_hash: str
    command: str
    artifacts: dict = field(default_factory=dict)
    versions: dict = field(default_factory=versions)
    started: str = field(default_factory=stamp)
    finished: str | None = None
    complete: bool = False

    def add(self, name: str, path: str | Path) -> None:
        self.artifacts[name] = str(path)

    def finish(self, complete: bool = True) -> None:
        self.finished = stamp()
        self.complete = complete and all(Path(p).exists() for p in self.artifacts.values())

    def save(self, out_dir: str | Path) -> Path:
        return write_json(Path(out_dir) / "manifest.json", asdict(self))

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))
