"""On-disk checkpoint format shared by every stage.

A checkpoint is a directory holding:
  * `manifest` - JSON text with the model config, schedule parameters,
    seed, step count, and format version;
  * one `<tensor-name>.bin` file per named tensor: a single ASCII header
    line `name shape dtype` followed by raw little-endian float32 bytes.

The tensor encoding is platform-independent, so inference from a checkpoint
is bit-exact across machines.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

Tensor = torch.Tensor

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest"


def _shape_str(shape: tuple[int, ...]) -> str:
    return "(" + ",".join(str(d) for d in shape) + ")"


def _parse_shape(text: str) -> tuple[int, ...]:
    inner = text.strip()
    if not (inner.startswith("(") and inner.endswith(")")):
        raise ValueError(f"malformed shape {text!r}")
    inner = inner[1:-1]
    return tuple(int(d) for d in inner.split(",") if d)


def save_checkpoint(directory: str | Path, manifest: dict, tensors: Mapping[str, Tensor]) -> Path:
    """Write manifest + tensor blobs; returns the checkpoint directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest.setdefault("format_version", FORMAT_VERSION)
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name, tensor in tensors.items():
        if "/" in name or name.startswith("."):
            raise ValueError(f"tensor name {name!r} is not filesystem-safe")
        arr = tensor.detach().cpu().contiguous().to(torch.float32).numpy().astype("<f4")
        header = f"{name} {_shape_str(tuple(arr.shape))} float32\n"
        with open(directory / f"{name}.bin", "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(arr.tobytes())
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read manifest + all tensor blobs back as float32 tensors."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest under {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    tensors: dict[str, torch.Tensor] = {}
    for path in sorted(directory.glob("*.bin")):
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii").strip()
            name, shape_text, dtype = header.rsplit(" ", 2)
            if dtype != "float32":
                raise ValueError(f"{path}: unsupported dtype {dtype}")
            if name != path.stem:
                raise ValueError(f"{path}: header names {name!r}, file names {path.stem!r}")
            shape = _parse_shape(shape_text)
            count = int(np.prod(shape)) if shape else 1
            data = fh.read()
        arr = np.frombuffer(data, dtype="<f4", count=count).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    return manifest, tensors


def state_dict_tensors(module: torch.nn.Module) -> dict[str, Tensor]:
    return {k: v for k, v in module.state_dict().items()}


def load_module_state(module: torch.nn.Module, tensors: Mapping[str, Tensor], prefix: str) -> None:
    """Load every tensor under `prefix.` into the module's state dict."""
    state = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    module.load_state_dict(state, strict=True)
