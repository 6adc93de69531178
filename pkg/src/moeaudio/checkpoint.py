"""Parameter checkpoints: one binary tensor blob per parameter plus a JSON manifest."""

from __future__ import annotations

import configparser
import json
from pathlib import Path

import numpy as np

from . import numerics as nx

MANIFEST = "manifest.json"


def _filename(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def save_params(directory, params: dict) -> Path:
    """Write ``params`` (name -> Node or array) under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        value = params[name]
        value = value.value if isinstance(value, nx.Node) else np.asarray(value)
        fname = _filename(name)
        nx.save_tensor(directory / fname, value)
        entries.append({"name": name, "shape": list(value.shape), "file": fname})
    path = directory / MANIFEST
    path.write_text(json.dumps({"format": "moeaudio-tensors/1", "tensors": entries}, indent=2) + "\n")
    return path


def load_params(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    out = {}
    for entry in manifest["tensors"]:
        t = nx.load_tensor(directory / entry["file"])
        if list(t.shape) != entry["shape"]:
            raise ValueError(f"{entry['name']}: manifest shape {entry['shape']} != stored {list(t.shape)}")
        out[entry["name"]] = t
    return out


def write_kv_config(path, values: dict, section: str = "config") -> None:
    parser = configparser.ConfigParser()
    parser[section] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def read_kv_config(path, section: str = "config") -> dict[str, str]:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if section not in parser:
        raise ValueError(f"{path}: missing [{section}] section")
    return dict(parser[section])
