"""Run manifests: every CLI command records its full config, seeds, input
hashes and output content hashes so a run can be replayed and verified."""

import json
import os
import platform
from dataclasses import dataclass, field

TOOL_VERSION = "0.1.0"


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    input_hashes: dict = field(default_factory=dict)
    output_paths: dict = field(default_factory=dict)
    output_hashes: dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    platform: str = field(default_factory=lambda: platform.platform())

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "input_hashes": self.input_hashes,
            "output_paths": self.output_paths,
            "output_hashes": self.output_hashes,
            "tool_version": self.tool_version,
            "platform": self.platform,
        }

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as f:
            d = json.load(f)
        m = cls(command=d["command"], config=d["config"])
        m.seeds = d.get("seeds", {})
        m.input_hashes = d.get("input_hashes", {})
        m.output_paths = d.get("output_paths", {})
        m.output_hashes = d.get("output_hashes", {})
        m.tool_version = d.get("tool_version", TOOL_VERSION)
        m.platform = d.get("platform", "")
        return m
