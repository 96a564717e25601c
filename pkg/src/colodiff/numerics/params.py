"""Named parameter collections with deterministic per-name initialization."""

from __future__ import annotations

import json
import os
import zlib
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from ..errors import ParameterError
from . import cdt
from .tensor import Tensor


def name_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name).

    Two models that share a parameter name and seed get the same initial
    values for it regardless of what other parameters they hold.
    """
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


class ParamStore:
    """Ordered mapping of parameter name to trainable :class:`Tensor`."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def normal(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        """Zero-mean Gaussian with std 1/sqrt(fan_in)."""
        data = name_rng(self.seed, name).standard_normal(shape) / np.sqrt(fan_in)
        return self._add(name, data)

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(name, np.zeros(shape))

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ParameterError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in self._params.items():
            arr = np.asarray(arrays[k])
            if arr.shape != p.shape:
                raise ParameterError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def cast(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for p in self._params.values():
            p.data = p.data.astype(dtype)
            p.grad = None


def save_arrays(directory: str | os.PathLike, arrays: Mapping[str, np.ndarray], manifest: dict) -> None:
    """Write each array as ``<name>.cdt`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        cdt.save(directory / f"{name}.cdt", arr)
        entries.append({"name": name, "shape": list(np.shape(arr)), "file": f"{name}.cdt"})
    doc = dict(manifest)
    doc["tensors"] = entries
    with open(directory / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_arrays(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    arrays = {}
    for entry in manifest["tensors"]:
        arr = cdt.load(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise ParameterError(f"{entry['name']}: manifest shape {entry['shape']} != file shape {arr.shape}")
        arrays[entry["name"]] = arr
    return arrays, manifest
