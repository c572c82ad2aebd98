"""Checkpoints as a JSON manifest plus one raw little-endian weight blob."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import torch

FORMAT = "focusbind-checkpoint/1"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def save_checkpoint(directory: Union[str, Path], kind: str, config: Dict[str, Any],
                    state: Dict[str, torch.Tensor], extra: Dict[str, Any] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    tmp_blob = directory / "weights.bin.tmp"
    with open(tmp_blob, "wb") as fh:
        for name, t in state.items():
            t = t.detach().cpu().contiguous()
            code = _DTYPES.get(t.dtype)
            if code is None:
                raise TypeError(f"unsupported dtype {t.dtype} for {name}")
            raw = t.numpy().astype(code, copy=False).tobytes()
            fh.write(raw)
            tensors.append({"name": name, "shape": list(t.shape), "dtype": code,
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    os.replace(tmp_blob, directory / "weights.bin")
    manifest = {"format": FORMAT, "kind": kind, "config": config,
                "tensors": tensors, "extra": extra or {}}
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, directory / "manifest.json")
    return directory


def load_checkpoint(directory: Union[str, Path], kind: str = None
                    ) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """Return ``(manifest, state_dict)``."""
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    if kind is not None and manifest.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {manifest.get('kind')!r}")
    blob = (directory / "weights.bin").read_bytes()
    state = {}
    for t in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype=t["dtype"], count=t["nbytes"] // np.dtype(t["dtype"]).itemsize,
                            offset=t["offset"])
        state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
    return manifest, state
