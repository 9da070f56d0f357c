"""
Run Config - layered JSON configuration for the engine
Built-in defaults, then config.json, then --seed/--out, then --override
section.key=value pairs. Unknown keys are rejected by their dotted names.
"""

import copy
import json
import logging
from datetime import datetime
from pathlib import Path

logger = logging.getLogger(__name__)

MODEL_KEYS = {"schedule", "resolution_mode", "levels", "base_channels", "spade_everywhere"}

DEFAULT_CONFIG = {
    "tool_name": "GammaLDM",
    "version": "1.0.0",
    "seed": 0,
    "paths": {"output_dir": "runs/default", "camus_root": None, "camus_label_order": "tool"},
    "phantom": {
        "n_patients": 90, "n_test_patients": 10, "views": ["A2C", "A4C"], "phases": ["ED", "ES"],
        "variants": 5, "resolution": 64,
    },
    "vae": {
        "levels": [1, 2], "width_unit": 64, "epochs": 20, "batch_size": 12, "learning_rate": 1e-4,
        "augmentations": ["colour", "geometric"],
        "lambda1": 1.0, "lambda2": 0.5, "lambda3": 1e-3, "lambda4": 1.0,
        "prior_alpha": 3.75, "prior_beta": 10.8,
        "alpha_grid": [0.25, 10.0, 40], "beta_grid": [0.5, 30.0, 60],
    },
    "diffusion": {"epochs": 30, "batch_size": 16, "learning_rate": 1e-4, "augment_probability": 0.5},
    "models": {},
    "sampler": {
        "kind": "heun", "nfe_settings": [2, 5, 10, 20, 50], "batch_size": 16, "rho": 7.0,
        "order_probe_steps": [10, 20, 40, 80, 160],
    },
    "downstream": {
        "tasks": ["seg", "cls"], "epochs": 15, "batch_size": 16, "learning_rate": 1e-4, "optimizer": "adam",
        "seg_base_channels": 16, "bootstrap_iterations": 1000, "bootstrap_fraction": 0.8,
        "bootstrap_replace": False, "shuffle_labels": False,
    },
    "bench": {"batch": 8, "repeats": 5, "reference": "edm", "nfe_settings": [2, 5, 10, 20, 50], "threads": None},
    "options": {
        "precision": "float32", "deterministic": True, "spade_everywhere": True, "sigma_embedding_dim": 32,
        "only_models": None,
    },
}


class ConfigError(ValueError):
    """Configuration document failed validation"""

    def __init__(self, message, keys=()):
        self.keys = list(keys)
        detail = f": {', '.join(self.keys)}" if self.keys else ""
        super().__init__(f"{message}{detail}")


def deep_merge(base, override):
    """Recursively merge override into a copy of base"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def flatten(document, prefix=""):
    """Dotted key=value view of a nested document"""
    flat = {}
    for key, value in document.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict) and value:
            flat.update(flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def unknown_keys(document, reference=DEFAULT_CONFIG, prefix=""):
    """Dotted names of keys absent from the reference schema"""
    unknown = []
    for key, value in document.items():
        dotted = f"{prefix}{key}"
        if key not in reference:
            unknown.append(dotted)
        elif prefix == "" and key == "models":
            if not isinstance(value, dict):
                unknown.append(dotted)
                continue
            for name, entry in value.items():
                if not isinstance(entry, dict):
                    unknown.append(f"models.{name}")
                    continue
                unknown += [f"models.{name}.{k}" for k in entry if k not in MODEL_KEYS]
        elif isinstance(reference[key], dict) and isinstance(value, dict):
            unknown += unknown_keys(value, reference[key], dotted + ".")
    return unknown


def parse_override(text):
    """
    Parse 'section.key=value'

    The value is read as JSON when possible (numbers, booleans, lists, null)
    and kept as a plain string otherwise.
    """
    if "=" not in text:
        raise ConfigError("Override must look like section.key=value", [text])
    dotted, raw = text.split("=", 1)
    dotted = dotted.strip()
    if not dotted:
        raise ConfigError("Override has an empty key", [text])
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return dotted.split("."), value


def apply_override(document, keys, value):
    target = document
    for key in keys[:-1]:
        target = target.setdefault(key, {})
        if not isinstance(target, dict):
            raise ConfigError("Override descends into a non-section key", [".".join(keys)])
    target[keys[-1]] = value


class RunConfig:
    """Resolved configuration of one engine run"""

    def __init__(self, data, source=None):
        self.data = data
        self.source = source
        bad = unknown_keys(data)
        if bad:
            raise ConfigError("Unknown configuration keys", bad)

    def __getitem__(self, section):
        return self.data[section]

    @property
    def seed(self):
        return int(self.data["seed"])

    @property
    def output_dir(self):
        return Path(self.data["paths"]["output_dir"])

    def flat(self):
        return flatten(self.data)

    def write_resolved(self, directory):
        """Write resolved_config.json into directory; returns its path"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "resolved_config.json"
        with open(path, "w") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)
        return path

    def update_manifest(self, command, artifacts, **fields):
        """Append a run entry to <output_dir>/manifest.json"""
        path = self.output_dir / "manifest.json"
        manifest = {"tool": self.data["tool_name"], "version": self.data["version"], "runs": []}
        if path.exists():
            with open(path, "r") as f:
                manifest = json.load(f)
        manifest.update(fields)
        manifest["runs"].append({
            "command": command,
            "timestamp": datetime.now().isoformat(),
            "seed": self.seed,
            "artifacts": [str(a) for a in artifacts],
        })
        self.output_dir.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2)
        return path


def load_run_config(config_path=None, overrides=(), seed=None, out=None):
    """
    Resolve defaults, config file, --seed/--out and overrides into a RunConfig

    Raises:
        ConfigError: on unreadable JSON, malformed overrides or unknown keys
    """
    data = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        config_path = Path(config_path)
        if not config_path.exists():
            raise ConfigError("Config file not found", [str(config_path)])
        try:
            with open(config_path, "r") as f:
                data = deep_merge(data, json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file is not valid JSON ({e})", [str(config_path)]) from e

    if seed is not None:
        data["seed"] = int(seed)
    if out is not None:
        data["paths"]["output_dir"] = str(out)
    for text in overrides or ():
        keys, value = parse_override(text)
        apply_override(data, keys, value)

    return RunConfig(data, source=config_path)
