"""Versioned little-endian float32 parameter files with a JSON sidecar.

Layout::

    b"CVLA" | u32 version | u32 count | count x (u32 name_len, name, u32 ndim, ndim x u32, f32 data)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CVLA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return out


def save_checkpoint(path, model, meta: dict, optimizer=None) -> Path:
    """Writes ``path`` (parameters), ``path.json`` (config + meta) and optionally ``path.opt``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = {n: p.detach().cpu().numpy() for n, p in model.named_parameters()}
    write_tensors(path, params)
    side = {"version": VERSION, "model": model.cfg.to_dict(), **meta}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        state, steps = {}, {}
        for p, st in optimizer.state.items():
            n = names[id(p)]
            state[f"{n}/exp_avg"] = st["exp_avg"].cpu().numpy()
            state[f"{n}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
            steps[n] = float(st["step"])
        write_tensors(path.with_suffix(path.suffix + ".opt"), state)
        side["optimizer_steps"] = steps
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True))
    return path


def load_meta(path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text())


def load_checkpoint(path, dtype=None):
    """Rebuild the model from its sidecar config and load the parameters."""
    import torch

    from .config import ModelConfig
    from .network import VLANet, is_action_param

    meta = load_meta(path)
    params = read_tensors(path)
    cfg = ModelConfig.from_dict(meta["model"])
    with_action = any(is_action_param(n) for n in params)
    model = VLANet(cfg, with_action=with_action)
    state = {n: torch.from_numpy(a) for n, a in params.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={unexpected}")
    if dtype is not None:
        model = model.to(dtype)
    return model, meta


def load_optimizer_state(path, model, optimizer) -> None:
    import torch

    meta = load_meta(path)
    opt_path = Path(str(path) + ".opt")
    if not opt_path.exists():
        raise CheckpointError(f"{path}: no optimizer state")
    state = read_tensors(opt_path)
    for n, p in model.named_parameters():
        if f"{n}/exp_avg" in state:
            optimizer.state[p] = {
                "step": torch.tensor(meta["optimizer_steps"][n]),
                "exp_avg": torch.from_numpy(state[f"{n}/exp_avg"]).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(state[f"{n}/exp_avg_sq"]).to(p.dtype),
            }
