"""Checkpoint format: structured-text header plus raw float32 tensor blobs.

Weights and optimizer moments are stored as named little-endian float32
tensors in header-declared order, so save -> load -> save is byte-stable
and a checkpoint is self-describing (the resolved config rides along as
one JSON line).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import FileFormatError

MAGIC = "flaglab-checkpoint v1"


@dataclass
class Checkpoint:
    mode: str
    step: int
    config: dict
    config_hash: str
    tensors: dict[str, np.ndarray]
    opt_tensors: dict[str, np.ndarray]
    opt_meta: dict


def _tensor_blobs(state: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        out[name] = arr
    return out


def _optimizer_blobs(optimizer) -> tuple[dict[str, np.ndarray], dict]:
    if optimizer is None:
        return {}, {"param_groups": [], "steps": {}}
    state = optimizer.state_dict()
    tensors, steps = {}, {}
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor) and value.ndim > 0:
                tensors[f"{idx}.{key}"] = value.detach().cpu().numpy().astype(np.float32)
            else:
                steps[f"{idx}.{key}"] = float(value)
    groups = []
    for g in state["param_groups"]:
        groups.append({k: v for k, v in g.items()})
    return tensors, {"param_groups": groups, "steps": steps}


def save_checkpoint(path, *, mode: str, step: int, config: dict, config_hash: str,
                    model: torch.nn.Module, optimizer=None) -> None:
    tensors = _tensor_blobs(model.state_dict())
    opt_tensors, opt_meta = _optimizer_blobs(optimizer)
    lines = [
        MAGIC,
        f"mode: {mode}",
        f"step: {int(step)}",
        f"config_hash: {config_hash}",
        f"config_json: {json.dumps(config, sort_keys=True)}",
        f"opt_meta: {json.dumps(opt_meta, sort_keys=True)}",
        f"n_tensors: {len(tensors)}",
    ]
    lines += [f"tensor: {json.dumps([n, list(a.shape)])}" for n, a in tensors.items()]
    lines.append(f"n_opt_tensors: {len(opt_tensors)}")
    lines += [f"opt_tensor: {json.dumps([n, list(a.shape)])}"
              for n, a in opt_tensors.items()]
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for arr in opt_tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise FileFormatError(f"{path}: missing blank line after header")
    lines = raw[:sep].decode("utf-8").split("\n")
    if lines[0] != MAGIC:
        raise FileFormatError(f"{path}: bad magic line")
    scalars, tensor_decls, opt_decls = {}, [], []
    for line in lines[1:]:
        key, _, value = line.partition(": ")
        if key == "tensor":
            tensor_decls.append(json.loads(value))
        elif key == "opt_tensor":
            opt_decls.append(json.loads(value))
        else:
            scalars[key] = value
    for required in ("mode", "step", "config_hash", "config_json", "opt_meta",
                     "n_tensors", "n_opt_tensors"):
        if required not in scalars:
            raise FileFormatError(f"{path}: missing header field {required!r}")
    if len(tensor_decls) != int(scalars["n_tensors"]):
        raise FileFormatError(f"{path}: tensor count mismatch")
    if len(opt_decls) != int(scalars["n_opt_tensors"]):
        raise FileFormatError(f"{path}: optimizer tensor count mismatch")

    payload = raw[sep + 2:]
    offset = 0

    def take(name, shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise FileFormatError(f"{path}: payload truncated in tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        offset += nbytes
        return arr.reshape(shape).copy()

    tensors = {name: take(name, shape) for name, shape in tensor_decls}
    opt_tensors = {name: take(name, shape) for name, shape in opt_decls}
    if offset != len(payload):
        raise FileFormatError(f"{path}: {len(payload) - offset} unexpected trailing bytes")
    return Checkpoint(
        mode=scalars["mode"], step=int(scalars["step"]),
        config=json.loads(scalars["config_json"]),
        config_hash=scalars["config_hash"],
        tensors=tensors, opt_tensors=opt_tensors,
        opt_meta=json.loads(scalars["opt_meta"]),
    )


def restore_model(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    state = model.state_dict()
    if set(state) != set(ckpt.tensors):
        missing = set(state) ^ set(ckpt.tensors)
        raise FileFormatError(f"checkpoint tensor names do not match the model: {sorted(missing)[:5]}")
    new_state = {}
    for name, ref in state.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FileFormatError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, model expects {tuple(ref.shape)}"
            )
        new_state[name] = torch.as_tensor(arr, dtype=ref.dtype)
    model.load_state_dict(new_state)


def restore_optimizer(optimizer, ckpt: Checkpoint) -> None:
    meta = ckpt.opt_meta
    grouped: dict[int, dict] = {}
    for name, arr in ckpt.opt_tensors.items():
        idx, key = name.split(".", 1)
        grouped.setdefault(int(idx), {})[key] = torch.as_tensor(arr)
    for name, value in meta.get("steps", {}).items():
        idx, key = name.split(".", 1)
        grouped.setdefault(int(idx), {})[key] = torch.tensor(value)
    optimizer.load_state_dict({
        "state": grouped,
        "param_groups": meta["param_groups"],
    })
