"""Binary checkpoints with an explicit manifest.

Layout: a 6-byte magic, a little-endian u32 format version, a u64 header
length, a UTF-8 JSON header (architecture hash, stage, domain, step,
metric snapshot, tensor manifest), then each tensor's raw bytes in
manifest order, row-major little-endian. Writes go to a temp file that is
renamed into place, so a crash never leaves a half-written checkpoint at
the target path.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigHashMismatch, IoFailure, ShapeMismatch, VersionUnsupported

logger = logging.getLogger(__name__)

MAGIC = b"TRRCKP"
FORMAT_VERSION = 1

_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}
_DTYPE_NAMES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64", np.dtype("<i8"): "i64"}

POSITION_TABLE = "user_encoder.positions.weight"


@dataclass
class Checkpoint:
    config_hash: str
    stage: str
    domain: str
    step: int
    tensors: dict[str, np.ndarray]
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _as_storable(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    # ascontiguousarray promotes 0-d to 1-d; reshape restores the rank
    arr = np.ascontiguousarray(arr).reshape(arr.shape)
    if arr.dtype not in _DTYPE_NAMES:
        if np.issubdtype(arr.dtype, np.floating):
            return arr.astype("<f8")
        if np.issubdtype(arr.dtype, np.integer):
            return arr.astype("<i8")
        raise IoFailure(name, f"tensor dtype {arr.dtype} has no storable form")
    return arr


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    manifest = []
    payloads = []
    for group, tensors in (("model", ckpt.tensors), ("optim", ckpt.optim)):
        for name, arr in tensors.items():
            arr = _as_storable(name, arr)
            manifest.append(
                {
                    "name": name,
                    "group": group,
                    "dtype": _DTYPE_NAMES[arr.dtype],
                    "shape": list(arr.shape),
                }
            )
            payloads.append(arr.tobytes())
    header = {
        "config_hash": ckpt.config_hash,
        "stage": ckpt.stage,
        "domain": ckpt.domain,
        "step": int(ckpt.step),
        "metrics": {k: float(v) for k, v in ckpt.metrics.items()},
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for payload in payloads:
            fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = str(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(path, f"cannot read checkpoint ({exc.strerror or exc})") from exc
    fixed = len(MAGIC) + 4 + 8
    if len(blob) < fixed:
        raise IoFailure(path, f"file is {len(blob)} bytes, shorter than the {fixed}-byte header")
    if blob[: len(MAGIC)] != MAGIC:
        raise IoFailure(path, "not a transrec checkpoint (bad magic)")
    version = int.from_bytes(blob[len(MAGIC) : len(MAGIC) + 4], "little")
    if version != FORMAT_VERSION:
        raise VersionUnsupported(path, version, FORMAT_VERSION)
    header_len = int.from_bytes(blob[len(MAGIC) + 4 : fixed], "little")
    if len(blob) < fixed + header_len:
        raise IoFailure(
            path,
            f"header claims {header_len} bytes at offset {fixed}, file holds "
            f"{len(blob) - fixed}",
        )
    try:
        header = json.loads(blob[fixed : fixed + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoFailure(path, f"header is not valid JSON ({exc})") from exc

    offset = fixed + header_len
    tensors: dict[str, np.ndarray] = {}
    optim: dict[str, np.ndarray] = {}
    for entry in header.get("manifest", []):
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        n_bytes = dtype.itemsize * count
        if offset + n_bytes > len(blob):
            raise IoFailure(
                path,
                f"tensor {entry['name']!r} needs {n_bytes} bytes at offset {offset}, "
                f"file holds {len(blob) - offset}",
            )
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        (tensors if entry["group"] == "model" else optim)[entry["name"]] = arr
        offset += n_bytes
    if offset != len(blob):
        raise IoFailure(path, f"{len(blob) - offset} trailing bytes after the last tensor")

    return Checkpoint(
        config_hash=header["config_hash"],
        stage=header["stage"],
        domain=header["domain"],
        step=int(header["step"]),
        tensors=tensors,
        optim=optim,
        metrics={k: float(v) for k, v in header.get("metrics", {}).items()},
        format_version=version,
    )


def manifest_text(ckpt: Checkpoint) -> str:
    """Plain-text manifest for eyeballing what a checkpoint holds."""
    lines = [
        f"stage={ckpt.stage} domain={ckpt.domain} step={ckpt.step} "
        f"config_hash={ckpt.config_hash} format={ckpt.format_version}"
    ]
    for key, value in sorted(ckpt.metrics.items()):
        lines.append(f"metric {key}={value:.6f}")
    for group, tensors in (("model", ckpt.tensors), ("optim", ckpt.optim)):
        for name, arr in tensors.items():
            shape = "x".join(str(d) for d in arr.shape) if arr.shape else "scalar"
            lines.append(f"{group} {name} {_DTYPE_NAMES[_as_storable(name, arr).dtype]} {shape}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# bridging to and from live models


def snapshot_model(
    model: torch.nn.Module,
    *,
    stage: str,
    domain: str,
    step: int,
    config_hash: str,
    metrics: dict[str, float] | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> Checkpoint:
    tensors = {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in model.state_dict().items()
    }
    optim: dict[str, np.ndarray] = {}
    if optimizer is not None:
        name_of = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for param in group["params"]:
                pname = name_of.get(id(param))
                if pname is None:
                    continue
                for key, value in optimizer.state.get(param, {}).items():
                    if isinstance(value, torch.Tensor):
                        optim[f"{pname}.{key}"] = value.detach().cpu().numpy().copy()
    return Checkpoint(
        config_hash=config_hash,
        stage=stage,
        domain=domain,
        step=step,
        tensors=tensors,
        optim=optim,
        metrics=dict(metrics or {}),
    )


@dataclass
class ApplyReport:
    loaded: list[str]
    fresh: list[str]
    skipped: list[str]
    resized: list[str]


def apply_checkpoint(
    model: torch.nn.Module,
    ckpt: Checkpoint,
    *,
    expected_hash: str,
    force_compat: bool = False,
) -> ApplyReport:
    """Copy checkpoint tensors into the model by name.

    Tensors absent from the checkpoint stay at their fresh initialization
    and are reported. The user-position table is the one tensor allowed to
    differ in shape: extra rows are dropped or kept fresh with a warning.
    """
    if ckpt.config_hash != expected_hash and not force_compat:
        raise ConfigHashMismatch(expected_hash, ckpt.config_hash)

    state = model.state_dict()
    loaded: list[str] = []
    fresh: list[str] = []
    resized: list[str] = []
    with torch.no_grad():
        for name, tensor in state.items():
            if name not in ckpt.tensors:
                fresh.append(name)
                continue
            src = ckpt.tensors[name]
            if tuple(src.shape) != tuple(tensor.shape):
                if name == POSITION_TABLE and src.ndim == 2 and src.shape[1] == tensor.shape[1]:
                    rows = min(src.shape[0], tensor.shape[0])
                    tensor[:rows] = torch.from_numpy(src[:rows]).to(tensor.dtype)
                    logger.warning(
                        "position table resized from %d to %d rows; %s",
                        src.shape[0],
                        tensor.shape[0],
                        "extra checkpoint rows dropped"
                        if src.shape[0] > tensor.shape[0]
                        else "new rows keep their fresh init",
                    )
                    resized.append(name)
                    loaded.append(name)
                    continue
                raise ShapeMismatch(name, src.shape, tensor.shape)
            tensor.copy_(torch.from_numpy(src).to(tensor.dtype))
            loaded.append(name)
    skipped = [name for name in ckpt.tensors if name not in state]
    if fresh:
        logger.info("fresh target-specific tensors: %s", ", ".join(fresh))
    if skipped:
        logger.info("checkpoint tensors without a model slot: %s", ", ".join(skipped))
    return ApplyReport(loaded=loaded, fresh=fresh, skipped=skipped, resized=resized)


def restore_optimizer(
    optimizer: torch.optim.Optimizer, model: torch.nn.Module, ckpt: Checkpoint
) -> int:
    """Put saved moment tensors back into an optimizer; returns how many
    parameters got their state restored."""
    params = dict(model.named_parameters())
    by_param: dict[str, dict[str, torch.Tensor]] = {}
    for key, arr in ckpt.optim.items():
        pname, state_key = key.rsplit(".", 1)
        if pname in params:
            by_param.setdefault(pname, {})[state_key] = torch.from_numpy(arr.copy())
    restored = 0
    for pname, state in by_param.items():
        param = params[pname]
        entry = dict(optimizer.state.get(param, {}))
        for state_key, tensor in state.items():
            if state_key == "step":
                entry[state_key] = tensor.reshape(())
            else:
                entry[state_key] = tensor.reshape(param.shape).to(param.dtype)
        optimizer.state[param] = entry
        restored += 1
    return restored
