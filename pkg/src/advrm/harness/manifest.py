"""Run manifest: config snapshot, artifact paths and stage-completion flags."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError, MissingArtifactError, StateError
from .config import ExperimentConfig, from_dict

MANIFEST = "manifest.json"


@dataclass
class RunManifest:
    root: Path
    config: ExperimentConfig
    stages: dict = field(default_factory=dict)  # name -> {"artifacts": {key: relpath}, "requires": [stage]}

    @property
    def seed(self):
        return self.config.seed

    @classmethod
    def open(cls, root, config: ExperimentConfig) -> "RunManifest":
        """Load the manifest in ``root``; create it if absent. A different config is an error."""
        root = Path(root)
        path = root / MANIFEST
        if path.exists():
            data = json.loads(path.read_text())
            stored = from_dict(data["config"])
            if stored.to_dict() != config.to_dict():
                raise ConfigError(f"{root} holds a run with a different config; use another --out")
            return cls(root, stored, data.get("stages", {}))
        root.mkdir(parents=True, exist_ok=True)
        m = cls(root, config)
        m.save()
        return m

    @classmethod
    def load(cls, root) -> "RunManifest":
        root = Path(root)
        data = json.loads((root / MANIFEST).read_text())
        return cls(root, from_dict(data["config"]), data.get("stages", {}))

    def save(self):
        path = self.root / MANIFEST
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"config": self.config.to_dict(), "seed": self.seed, "stages": self.stages},
                                  indent=2, sort_keys=True))
        tmp.replace(path)

    def done(self, stage) -> bool:
        """All artifacts of ``stage`` exist and every stage it was built from is still done."""
        entry = self.stages.get(stage)
        if not entry or not all((self.root / p).exists() for p in entry["artifacts"].values()):
            return False
        return all(self.done(dep) for dep in entry.get("requires", ()))

    def mark(self, stage, requires=(), **artifacts):
        for key, p in artifacts.items():
            if not (self.root / p).exists():
                raise StateError(f"stage {stage}: artifact {p} was not written")
        self.stages[stage] = {"artifacts": {k: str(p) for k, p in sorted(artifacts.items())},
                              "requires": list(requires)}
        self.save()

    def artifact(self, stage, key) -> Path:
        if not self.done(stage):
            raise MissingArtifactError(f"{key} ({stage})", stage.split(":")[0])
        return self.root / self.stages[stage]["artifacts"][key]

    def require(self, stage, command=None):
        if not self.done(stage):
            raise MissingArtifactError(stage, command or stage.split(":")[0])
