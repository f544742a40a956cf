"""
CSV artifacts and the run manifest.

Every file a command produces goes through one ArtifactWriter, which
records a SHA-256 per CSV so that `evshare rerun` can prove a rerun
reproduced the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import scipy

from evshare import __version__
from evshare.errors import ConfigError
from evshare.log import get_logger

log = get_logger(__name__)

FLOAT_FORMAT = "%.9g"
MANIFEST_NAME = "manifest.json"


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_frame(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, float_format=FLOAT_FORMAT, index=False, lineterminator="\n")
    return path


def package_versions() -> Dict[str, str]:
    return {
        "evshare": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "python": platform.python_version(),
    }


@dataclass
class RunManifest:
    """What was run, with which inputs, and what it wrote."""

    command: str
    options: Dict[str, Any]
    config: Optional[Dict[str, Any]]
    config_hash: Optional[str]
    base_dir: str
    seed: int
    jobs: int
    model: str
    versions: Dict[str, str] = field(default_factory=package_versions)
    artifacts: Dict[str, str] = field(default_factory=dict)
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}")
        try:
            data = json.loads(path.read_text())
            return cls(**data)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"{path}: not a run manifest ({exc})") from None


class ArtifactWriter:
    """Single collector for the files of one run."""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.written: Dict[str, Path] = {}

    def frame(self, name: str, frame: pd.DataFrame) -> Path:
        path = write_frame(frame, self.out_dir / name)
        self.written[name] = path
        log.debug("artifact.write", name=name, rows=len(frame))
        return path

    def finish(self, manifest: RunManifest) -> Path:
        manifest.artifacts = {name: sha256_file(path) for name, path in sorted(self.written.items())}
        path = self.out_dir / MANIFEST_NAME
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.to_json())
        log.info("artifact.manifest", path=str(path), artifacts=len(manifest.artifacts))
        return path


def compare_artifacts(expected: RunManifest, actual: RunManifest) -> List[str]:
    """Names of artifacts whose hashes differ or that are missing on either side."""
    names = set(expected.artifacts) | set(actual.artifacts)
    return sorted(n for n in names if expected.artifacts.get(n) != actual.artifacts.get(n))
