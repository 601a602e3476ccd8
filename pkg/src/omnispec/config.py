"""Run configuration: sectioned key=value documents plus flag overrides.

The merged configuration is snapshotted into the run directory before any
work starts; rerunning from the snapshot reproduces the run bit for bit.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from .errors import ValidationError
from .model import ModelConfig

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0"},
    "model": {
        "patch": "8", "d_spec": "64", "d_spat": "64", "n_reps": "8",
        "depth_spec": "2", "depth_spat": "4", "heads": "", "mlp_ratio": "4",
        "sigma": "3.0", "alpha": "1e-3", "n_classes": "4",
    },
    "train": {
        "steps": "2000", "batch": "8", "lr": "1e-3", "lr_final": "1e-5",
        "weight_decay": "0.04", "max_channels": "32", "dice": "false",
        "log_every": "1", "checkpoint_every": "0",
    },
    "pretrain": {
        "steps": "400", "batch": "8", "lr": "2e-3", "lr_final": "1e-6",
        "weight_decay": "0.04", "mask_style": "contiguous",
        "log_every": "1", "checkpoint_every": "0",
    },
}


class RunConfig:
    def __init__(self, sections: dict[str, dict[str, str]]):
        self.sections = sections

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        """Defaults <- optional config file <- explicit 'section.key=value'."""
        sections = {s: dict(kv) for s, kv in DEFAULTS.items()}
        if path is not None:
            parser = configparser.ConfigParser()
            read = parser.read(path)
            if not read:
                raise ValidationError(f"config file {path} not found")
            for section in parser.sections():
                if section not in sections:
                    raise ValidationError(f"unknown config section [{section}]")
                for key, value in parser.items(section):
                    if key not in sections[section]:
                        raise ValidationError(f"unknown config key {section}.{key}")
                    sections[section][key] = value
        for dotted, value in (overrides or {}).items():
            if "." not in dotted:
                raise ValidationError(f"override {dotted!r} must be section.key")
            section, key = dotted.split(".", 1)
            if section not in sections or key not in sections[section]:
                raise ValidationError(f"unknown config key {section}.{key}")
            sections[section][key] = str(value)
        return cls(sections)

    def get(self, section: str, key: str) -> str:
        return self.sections[section][key]

    def get_int(self, section: str, key: str) -> int:
        try:
            return int(self.get(section, key))
        except ValueError as exc:
            raise ValidationError(f"{section}.{key} must be an integer") from exc

    def get_float(self, section: str, key: str) -> float:
        try:
            return float(self.get(section, key))
        except ValueError as exc:
            raise ValidationError(f"{section}.{key} must be a number") from exc

    def get_bool(self, section: str, key: str) -> bool:
        value = self.get(section, key).lower()
        if value in ("true", "1", "yes"):
            return True
        if value in ("false", "0", "no"):
            return False
        raise ValidationError(f"{section}.{key} must be a boolean")

    def model_config(self) -> ModelConfig:
        s = self.sections["model"]
        heads = s.get("heads", "")
        n_classes = s.get("n_classes", "")
        return ModelConfig(
            patch=int(s["patch"]), d_spec=int(s["d_spec"]),
            d_spat=int(s["d_spat"]) if s["d_spat"] else None,
            n_reps=int(s["n_reps"]), depth_spec=int(s["depth_spec"]),
            depth_spat=int(s["depth_spat"]),
            heads=int(heads) if heads else None,
            mlp_ratio=int(s["mlp_ratio"]), sigma=float(s["sigma"]),
            alpha=float(s["alpha"]),
            n_classes=int(n_classes) if n_classes else None,
        )

    def snapshot(self, path) -> None:
        parser = configparser.ConfigParser()
        for section, kv in self.sections.items():
            parser[section] = kv
        with open(path, "w") as fh:
            parser.write(fh)

    def digest(self) -> str:
        blob = json.dumps(self.sections, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def hash_paths(paths) -> str:
    """Content hash over a list of input files (order-independent)."""
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()
