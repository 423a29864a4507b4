"""Run records, config hashing and named seed streams."""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def config_hash(cfg):
    """Short sha256 of the canonical JSON form; independent of key order."""
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def derive_seed(root, purpose):
    """Independent 63-bit seed for a named consumer of randomness.

    Adding a new purpose string never changes the seeds of existing ones.
    """
    digest = hashlib.sha256(f"{int(root)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def git_describe(cwd=None):
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=cwd,
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


CSV_COLUMNS = ("config_hash", "task", "alg", "family", "layer", "size", "d_rn", "L_rn", "seed",
               "iia", "plain_acc", "epochs", "status", "wall_ms")


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    task: str = ""
    alg: str = ""
    family: str = ""
    layer: int = 0
    size: int = 0
    d_rn: int | None = None
    L_rn: int | None = None
    iia: float | None = None
    plain_acc: float | None = None
    epochs: int = 0
    wall_ms: float = 0.0
    status: str = "ok"
    error: str | None = None
    git: str = "unknown"
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)

    def csv_row(self):
        d = asdict(self)
        return [("" if d[c] is None else d[c]) for c in CSV_COLUMNS]

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable))
