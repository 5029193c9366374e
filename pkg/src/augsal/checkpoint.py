"""Weight checkpoints: a directory of AUGSAL1 tensors plus a JSON manifest
listing parameter names, shapes and dtypes.

The same layout serves the backbone and every readout head; loading is
strict (missing or misshapen parameters raise DataError).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch.nn as nn
import torch

from .errors import DataError
from .tensorfile import read_tensor, write_tensor

FORMAT_NAME = "augsal-checkpoint-v1"


def module_arrays(module: nn.Module, prefix: str = "") -> Dict[str, np.ndarray]:
    """Flatten a torch module's state dict into name -> float64 arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}{name}"] = tensor.detach().numpy().astype(np.float64)
    return out


def load_module_arrays(module: nn.Module, arrays: Dict[str, np.ndarray],
                       prefix: str = "") -> None:
    sd = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}{name}"
        if key not in arrays:
            raise DataError(f"checkpoint missing parameter {key}")
        arr = np.asarray(arrays[key])
        if tuple(arr.shape) != tuple(tensor.shape):
            raise DataError(f"checkpoint parameter {key} has shape {arr.shape}, "
                            f"expected {tuple(tensor.shape)}")
        sd[name] = torch.from_numpy(arr.astype(np.float32, copy=True))
    module.load_state_dict(sd)


def save_checkpoint(path, arrays: Dict[str, np.ndarray],
                    meta: Optional[dict] = None) -> None:
    """Write arrays as individual AUGSAL1 files under ``path`` with a manifest."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    params = []
    for i, name in enumerate(sorted(arrays)):
        arr = np.asarray(arrays[name])
        fname = f"tensors/p{i:04d}.aug"
        write_tensor(arr, path / fname)
        params.append({"name": name, "file": fname,
                       "shape": list(arr.shape), "dtype": str(arr.dtype)})
    manifest = {"format": FORMAT_NAME, "meta": meta or {}, "params": params}
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_NAME:
        raise DataError(f"unknown checkpoint format {manifest.get('format')!r}")
    arrays = {}
    for p in manifest["params"]:
        arr = read_tensor(path / p["file"], expect_shape=p["shape"],
                          expect_dtype=p["dtype"])
        arrays[p["name"]] = arr
    return arrays, manifest.get("meta", {})
