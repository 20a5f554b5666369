"""Checkpoint archive.

A checkpoint is a zip archive holding ``index.json`` and ``tensors.bin``.
The index maps canonical parameter names to ``{shape, dtype, offset}``
records over the raw little-endian float32 buffer, and carries the
architecture fingerprint plus free-form metadata. Names are namespaced
(``detector/``, ``student/``, ``afsp/``, ``transform/``, ``proto_teacher/`` ...).
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointMismatch(RuntimeError):
    """Architecture fingerprint or tensor layout does not match the model."""


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], fingerprint: str, metadata: Optional[dict] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    index = {}
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        index[name] = {"shape": list(arr.shape), "dtype": "<f4", "offset": buf.tell(), "nbytes": arr.nbytes}
        buf.write(np.ascontiguousarray(arr).tobytes())
    header = {"format": FORMAT_VERSION, "fingerprint": fingerprint, "metadata": metadata or {}, "tensors": index}
    # fixed timestamps keep archives byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for arcname, payload in (("index.json", json.dumps(header, indent=1, sort_keys=True).encode()),
                                 ("tensors.bin", buf.getvalue())):
            info = zipfile.ZipInfo(arcname, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)
    return path


def load_checkpoint(path):
    """Return ``(tensors, fingerprint, metadata)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("index.json"))
            blob = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointMismatch(f"corrupt checkpoint {path}: {exc}") from exc
    tensors = {}
    for name, rec in header["tensors"].items():
        arr = np.frombuffer(blob, dtype=rec["dtype"], count=int(np.prod(rec["shape"], dtype=np.int64)),
                            offset=rec["offset"]).reshape(rec["shape"])
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, header["fingerprint"], header.get("metadata", {})


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items() if v.is_floating_point()}


def restore_module(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str):
    state = module.state_dict()
    for key, current in state.items():
        if not current.is_floating_point():
            continue
        name = f"{prefix}/{key}"
        if name not in tensors:
            raise CheckpointMismatch(f"checkpoint lacks tensor {name}")
        if tuple(tensors[name].shape) != tuple(current.shape):
            raise CheckpointMismatch(f"shape mismatch for {name}: {tuple(tensors[name].shape)} vs {tuple(current.shape)}")
        state[key] = tensors[name].to(current.dtype)
    module.load_state_dict(state)
    return module
