"""Run configuration: a versioned, hashable record of everything a command
resolved before running.

Every artifact a command writes embeds the config version and hash, so any
output can be traced to the exact settings that produced it and reruns can
be verified byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

CONFIG_VERSION = 1


@dataclass
class RunConfig:
    command: str
    settings: dict = field(default_factory=dict)
    version: int = CONFIG_VERSION

    def canonical_json(self) -> str:
        return json.dumps(
            {"version": self.version, "command": self.command, "settings": self.settings},
            sort_keys=True,
        )

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def note(self) -> dict:
        """The stamp embedded into every artifact."""
        return {"config_version": self.version, "config_hash": self.hash()}

    def save(self, path: str | Path) -> None:
        doc = {
            "version": self.version,
            "command": self.command,
            "settings": self.settings,
            "hash": self.hash(),
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        doc = json.loads(Path(path).read_text())
        return RunConfig(doc["command"], doc["settings"], doc["version"])
