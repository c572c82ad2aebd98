"""Focused cross-attention: attention averaging, focus masks and masked attention."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

ArrayLike = Union[np.ndarray, torch.Tensor]


class MaskError(ValueError):
    pass


@dataclass
class AttentionEntry:
    layer: str
    timestep: int
    map: torch.Tensor  # (..., h*w, n), rows are softmax distributions
    hw: Tuple[int, int]


@dataclass
class AttentionRecord:
    entries: List[AttentionEntry] = field(default_factory=list)

    def add(self, layer: str, timestep: int, attn: torch.Tensor, hw: Tuple[int, int]) -> None:
        self.entries.append(AttentionEntry(layer, int(timestep), attn, tuple(hw)))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def timesteps(self) -> List[int]:
        return sorted({e.timestep for e in self.entries})

    @property
    def largest_hw(self) -> Tuple[int, int]:
        return max((e.hw for e in self.entries), key=lambda hw: hw[0] * hw[1])


@dataclass
class AveragedAttention:
    A_star: torch.Tensor  # (..., H*W, n)
    hw: Tuple[int, int]


@dataclass
class FocusMask:
    mask: torch.Tensor  # (..., H*W, n), entries are -inf or 0
    hw: Tuple[int, int]
    threshold_used: float = float("nan")

    def masked_fraction(self) -> float:
        return float(torch.isinf(self.mask).float().mean())


def _resize_maps(maps: torch.Tensor, hw: Tuple[int, int], size: Tuple[int, int]) -> torch.Tensor:
    """Bicubic resize of (..., h*w, n) token maps to (..., H*W, n)."""
    h, w = hw
    lead = maps.shape[:-2]
    n = maps.shape[-1]
    if (h, w) == tuple(size):
        return maps
    x = maps.reshape(-1, h, w, n).permute(0, 3, 1, 2)
    x = F.interpolate(x, size=size, mode="bicubic", align_corners=False)
    # bicubic overshoots below zero next to sharp edges
    x = x.clamp_min(0)
    return x.permute(0, 2, 3, 1).reshape(*lead, size[0] * size[1], n)


def aggregate_attention(record: AttentionRecord) -> AveragedAttention:
    """Average all recorded maps at the largest layer resolution."""
    if len(record) == 0:
        raise ValueError("empty attention record")
    n = record.entries[0].map.shape[-1]
    for e in record.entries:
        if e.map.shape[-1] != n:
            raise MaskError(f"layer {e.layer} at t={e.timestep} has {e.map.shape[-1]} tokens, expected {n}")
        if e.map.shape[-2] != e.hw[0] * e.hw[1]:
            raise MaskError(f"layer {e.layer}: {e.map.shape[-2]} rows do not match {e.hw}")
    H, W = record.largest_hw
    total = None
    for e in record.entries:
        m = _resize_maps(e.map.to(torch.float64), e.hw, (H, W))
        total = m if total is None else total + m
    return AveragedAttention((total / len(record)).to(record.entries[0].map.dtype), (H, W))


def compute_focus_mask(
    A_star: Union[AveragedAttention, ArrayLike],
    D: ArrayLike,
    s: float = 0.5,
    hw: Optional[Tuple[int, int]] = None,
) -> FocusMask:
    """Threshold the min-max normalised ``A* @ D.T`` columns at ``s``.

    Columns of tokens without dependencies, and constant columns, stay
    unmasked.
    """
    if not 0.0 <= s <= 1.0:
        raise MaskError(f"threshold must lie in [0, 1], got {s}")
    if isinstance(A_star, AveragedAttention):
        hw = A_star.hw
        A = A_star.A_star
    else:
        A = torch.as_tensor(A_star)
    if torch.isnan(A).any():
        raise MaskError("NaN in averaged attention")
    Dt = torch.as_tensor(np.asarray(D) if not torch.is_tensor(D) else D).to(A.dtype)
    n = A.shape[-1]
    if Dt.shape[-2:] != (n, n):
        raise MaskError(f"dependency matrix {tuple(Dt.shape)} does not match {n} tokens")
    if hw is None:
        side = int(round(math.sqrt(A.shape[-2])))
        hw = (side, side)

    B = A @ Dt.transpose(-1, -2)
    lo = B.amin(dim=-2, keepdim=True)
    hi = B.amax(dim=-2, keepdim=True)
    span = hi - lo
    active = (Dt.sum(dim=-1) > 0).unsqueeze(-2) & (span > 0)
    norm = (B - lo) / torch.where(span > 0, span, torch.ones_like(span))
    masked = active & (norm < s)
    mask = torch.zeros_like(B)
    mask[masked] = float("-inf")
    return FocusMask(mask, tuple(hw), float(s))


def focused_attention(
    Q: torch.Tensor,
    K: torch.Tensor,
    V: torch.Tensor,
    mask: Union[FocusMask, torch.Tensor, None] = None,
    return_weights: bool = False,
):
    """softmax((mask + Q K^T) / sqrt(d)) V over the token axis."""
    d = Q.shape[-1]
    logits = Q @ K.transpose(-1, -2)
    if mask is not None:
        m = mask.mask if isinstance(mask, FocusMask) else mask
        if torch.isinf(m).all(dim=-1).any():
            raise MaskError("a query row is masked for every token; softmax is undefined")
        logits = logits + m.to(logits.dtype)
    weights = torch.softmax(logits / math.sqrt(d), dim=-1)
    out = weights @ V
    return (out, weights) if return_weights else out


def project_mask(mask: FocusMask, target_hw: Tuple[int, int]) -> FocusMask:
    """Max-pool each token channel down to ``target_hw`` (conservative unmasking)."""
    H, W = mask.hw
    h, w = target_hw
    if (h, w) == (H, W):
        return mask
    if H % h or W % w or h > H or w > W:
        raise MaskError(f"cannot pool {mask.hw} onto {target_hw}")
    m = mask.mask
    lead = m.shape[:-2]
    n = m.shape[-1]
    x = m.reshape(-1, H, W, n).permute(0, 3, 1, 2)
    x = F.max_pool2d(x, kernel_size=(H // h, W // w))
    x = x.permute(0, 2, 3, 1).reshape(*lead, h * w, n)
    return FocusMask(x, (h, w), mask.threshold_used)


# -- dump format ---------------------------------------------------------

def write_dump(
    directory: Union[str, Path],
    tokens: Sequence[str],
    arrays: Dict[str, Tuple[np.ndarray, Tuple[int, int]]],
    meta: Optional[Dict[str, dict]] = None,
) -> Path:
    """Write maps as raw little-endian float32 files plus ``manifest.json``.

    ``arrays`` maps an entry name to ``(array of shape (h*w, n), (h, w))``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, (arr, hw) in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        fname = f"{name}.f32"
        tmp = directory / (fname + ".tmp")
        tmp.write_bytes(arr.tobytes())
        tmp.replace(directory / fname)
        entry = {"name": name, "file": fname, "shape": list(arr.shape), "hw": list(hw)}
        entry.update((meta or {}).get(name, {}))
        entries.append(entry)
    manifest = {"format": "focusbind-attention-dump/1", "dtype": "float32-le",
                "tokens": list(tokens), "entries": entries}
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(directory / "manifest.json")
    return directory


def read_dump(directory: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no attention dump at {directory}")
    manifest = json.loads(manifest_path.read_text())
    arrays = {}
    for e in manifest["entries"]:
        raw = np.frombuffer((directory / e["file"]).read_bytes(), dtype="<f4")
        arrays[e["name"]] = raw.reshape(e["shape"]).copy()
    return manifest, arrays
