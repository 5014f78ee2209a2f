"""
Checkpoint - named parameter arrays as one flat float64 binary plus a text manifest.

    <path>.bin        little-endian float64, arrays back to back
    <path>.manifest   one line per array: name<TAB>shape<TAB>offset (offset in elements)
"""

import os
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import CheckpointError
from .graph import Node


def _shape_text(shape: Tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text: str) -> Tuple[int, ...]:
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def save_checkpoint(path: str, named: Sequence[Tuple[str, Node]]) -> Tuple[str, str]:
    """Write `named` parameters; returns (binary path, manifest path)."""
    names = [name for name, _ in named]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names in checkpoint")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    bin_path, manifest_path = f"{path}.bin", f"{path}.manifest"

    lines: List[str] = []
    chunks: List[np.ndarray] = []
    offset = 0
    for name, node in named:
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"parameter name {name!r} contains a tab or newline")
        lines.append(f"{name}\t{_shape_text(node.shape)}\t{offset}")
        chunks.append(np.asarray(node.value, dtype="<f8").reshape(-1))
        offset += node.value.size

    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    with open(bin_path, "wb") as f:
        f.write(flat.astype("<f8").tobytes())
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    return bin_path, manifest_path


def read_checkpoint(path: str) -> Dict[str, np.ndarray]:
    bin_path, manifest_path = f"{path}.bin", f"{path}.manifest"
    if not (os.path.exists(bin_path) and os.path.exists(manifest_path)):
        raise CheckpointError(f"checkpoint not found: {path}")
    flat = np.fromfile(bin_path, dtype="<f8")
    arrays: Dict[str, np.ndarray] = {}
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                name, shape_text, offset_text = line.split("\t")
                shape, offset = _parse_shape(shape_text), int(offset_text)
            except ValueError:
                raise CheckpointError(f"{manifest_path}:{lineno}: malformed manifest line")
            size = int(np.prod(shape)) if shape else 1
            if offset < 0 or offset + size > len(flat):
                raise CheckpointError(f"{manifest_path}:{lineno}: '{name}' runs past the end of the data")
            arrays[name] = flat[offset:offset + size].reshape(shape).copy()
    return arrays


def load_checkpoint(path: str, named: Sequence[Tuple[str, Node]]) -> None:
    """Copy stored arrays into `named` parameters in place; names and shapes must match."""
    arrays = read_checkpoint(path)
    for name, node in named:
        if name not in arrays:
            raise CheckpointError(f"checkpoint has no parameter '{name}'")
        if arrays[name].shape != node.shape:
            raise CheckpointError(f"'{name}': stored shape {arrays[name].shape} != {node.shape}")
    for name, node in named:
        node.value = arrays[name].copy()
