"""On-disk parameter store.

A store directory holds ``header.json`` (entry names, shapes, dtype and any
caller metadata such as a config echo) and ``params.bin``: the raw
little-endian float32 arrays concatenated in header order.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError

DTYPE = "<f4"
HEADER = "header.json"
BLOB = "params.bin"


def write_blob(path: Path, arrays) -> list[dict]:
    entries = []
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=DTYPE)
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape)})
    return entries


def read_blob(path: Path, entries) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    out = OrderedDict()
    offset = 0
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=DTYPE, count=n, offset=offset).reshape(e["shape"])
        out[e["name"]] = arr.astype(np.float32)
        offset += 4 * n
    if offset != len(raw):
        raise ConfigError(f"{path}: {len(raw) - offset} trailing bytes do not match the header")
    return out


class ParameterStore(OrderedDict):
    """Ordered mapping of parameter name to float32 array."""

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParameterStore":
        return cls((k, v.detach().cpu().numpy().astype(np.float32)) for k, v in module.state_dict().items())

    def load_into(self, module: torch.nn.Module) -> None:
        expected = module.state_dict()
        if list(expected) != list(self):
            missing = set(expected) ^ set(self)
            raise ConfigError(f"parameter names do not match the model: {sorted(missing)[:5]}")
        for name, ref in expected.items():
            if tuple(ref.shape) != self[name].shape:
                raise ConfigError(f"{name}: stored shape {self[name].shape} != model {tuple(ref.shape)}")
        module.load_state_dict(
            OrderedDict((k, torch.from_numpy(v.copy()).to(expected[k].dtype)) for k, v in self.items())
        )

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))

    def save(self, directory, meta: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = write_blob(directory / BLOB, self)
        header = {"dtype": "float32-le", "entries": entries, **(meta or {})}
        (directory / HEADER).write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> tuple["ParameterStore", dict]:
        directory = Path(directory)
        header = json.loads((directory / HEADER).read_text())
        if header.get("dtype") != "float32-le":
            raise ConfigError(f"unsupported parameter dtype {header.get('dtype')!r}")
        return cls(read_blob(directory / BLOB, header["entries"])), header
