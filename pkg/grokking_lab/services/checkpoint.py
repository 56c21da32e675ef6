"""Checkpoint files.

Layout of ``checkpoint.bin``::

    b"GROKCKPT"                 magic, 8 bytes
    uint32 little-endian        format version
    uint32 little-endian        length of the JSON header in bytes
    JSON header                 model config, tensor manifest, optimizer flag, step, epoch,
                                recent total losses of the plateau check
    '<f4' tensors               W_E, W_pos, W_Q, W_K, W_V, W_O, W_in, W_out, W_U
    '<f4' tensors (optional)    first moments in the same order, then second moments

A sidecar ``checkpoint.json`` next to the binary repeats the model config,
optimizer flag and step, and adds the run's task and split.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from grokking_lab.core.exceptions import LabError
from grokking_lab.models.models import ModelParams, OptimizerState
from grokking_lab.schemas.schemas import DataSplit, ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"GROKCKPT"
VERSION = 1
TENSOR_DTYPE = np.dtype("<f4")
SIDECAR_NAME = "checkpoint.json"

PathLike = Union[str, Path]


class CheckpointError(LabError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    model: ModelConfig
    optimizer_state: Optional[OptimizerState]
    epoch: int
    split: Optional[DataSplit] = None
    loss_window: List[float] = field(default_factory=list)

    @property
    def has_optimizer_state(self) -> bool:
        return self.optimizer_state is not None


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_name(SIDECAR_NAME)


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = ModelParams.tensor_names()
    tensors = [ckpt.params.tensors()[name] for name in names]
    if ckpt.optimizer_state is not None:
        tensors += [ckpt.optimizer_state.m[name] for name in names]
        tensors += [ckpt.optimizer_state.v[name] for name in names]

    header = {
        "model": ckpt.model.model_dump(mode="json"),
        "tensors": [{"name": name, "shape": list(ckpt.params.tensors()[name].shape)} for name in names],
        "has_optimizer_state": ckpt.has_optimizer_state,
        "step": ckpt.optimizer_state.t if ckpt.optimizer_state is not None else 0,
        "epoch": ckpt.epoch,
        "loss_window": [float(total) for total in ckpt.loss_window],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for tensor in tensors:
            fh.write(np.ascontiguousarray(tensor, dtype=TENSOR_DTYPE).tobytes())
    tmp.replace(path)

    sidecar = {
        "model": header["model"],
        "has_optimizer_state": header["has_optimizer_state"],
        "step": header["step"],
        "epoch": ckpt.epoch,
        "task": ckpt.split.task.model_dump(mode="json") if ckpt.split is not None else None,
        "split": ckpt.split.model_dump(mode="json", exclude_none=True) if ckpt.split is not None else None,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2))
    logger.debug(f"Wrote checkpoint {path} (epoch {ckpt.epoch})")
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    offset = len(MAGIC)
    if len(data) < offset + 8:
        raise CheckpointError(f"{path} is truncated")
    version, header_len = struct.unpack_from("<II", data, offset)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset += 8
    if len(data) < offset + header_len:
        raise CheckpointError(f"{path} is truncated")
    header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    model = ModelConfig.model_validate(header["model"])
    dtype = np.dtype(model.dtype)

    def read(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + count * TENSOR_DTYPE.itemsize
        if end > len(data):
            raise CheckpointError(f"{path} is truncated")
        array = np.frombuffer(data, dtype=TENSOR_DTYPE, count=count, offset=offset).reshape(shape).astype(dtype)
        offset = end
        return array

    manifest = header["tensors"]
    params = ModelParams(**{entry["name"]: read(entry["shape"]) for entry in manifest})
    state = None
    if header["has_optimizer_state"]:
        m = {entry["name"]: read(entry["shape"]) for entry in manifest}
        v = {entry["name"]: read(entry["shape"]) for entry in manifest}
        state = OptimizerState(m=m, v=v, t=int(header["step"]))
    if offset != len(data):
        raise CheckpointError(f"{path} has {len(data) - offset} trailing bytes")

    split = None
    sidecar = sidecar_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if meta.get("split"):
            split = DataSplit.model_validate(meta["split"])
    return Checkpoint(
        params=params,
        model=model,
        optimizer_state=state,
        epoch=int(header["epoch"]),
        split=split,
        loss_window=[float(total) for total in header.get("loss_window", [])],
    )
