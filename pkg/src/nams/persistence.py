"""Single-file checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"NAMSCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header (sorted keys); header["arrays"] lists
              {"name", "shape"} in blob order
    ...       float64 little-endian blobs, row-major, in that order

The file must end exactly after the last blob.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, MultipoleSet, NamsModel

MAGIC = b"NAMSCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class LengthMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    arrays: dict
    pole_ids: list
    total_poles: int
    source: list
    train_config: dict = field(default_factory=dict)
    prune_events: list = field(default_factory=list)
    best_epoch: int = -1
    best_test_loss: float | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: NamsModel, **kwargs) -> "Checkpoint":
        cfg = model.config
        arrays = {name: t.value.copy() for name, t in model.store.items()}
        return cls(
            model_config={
                "sh_order": cfg.sh_order,
                "center": [float(v) for v in cfg.center],
                "scale": float(cfg.scale),
                "hidden": cfg.hidden,
                "signal_len": cfg.signal_len,
                "speed_of_sound": float(cfg.speed_of_sound),
                "final_gain": float(cfg.final_gain),
            },
            arrays=arrays,
            pole_ids=[int(i) for i in model.poles.ids],
            total_poles=int(model.poles.total),
            source=[float(v) for v in model.poles.source],
            **kwargs,
        )

    def to_model(self) -> NamsModel:
        mc = dict(self.model_config)
        mc["center"] = tuple(mc["center"])
        config = ModelConfig(**mc)
        store = ad.ParamStore()
        for name, value in self.arrays.items():
            store.add(name, value.copy())
        poles = MultipoleSet(
            store["poles"], np.asarray(self.pole_ids, dtype=int), self.total_poles, np.asarray(self.source, float)
        )
        return NamsModel(config, store, poles, dict(self.meta))


def _header(ckpt: Checkpoint) -> dict:
    return {
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in ckpt.arrays.items()],
        "model_config": ckpt.model_config,
        "pole_ids": ckpt.pole_ids,
        "total_poles": ckpt.total_poles,
        "source": ckpt.source,
        "train_config": ckpt.train_config,
        "prune_events": ckpt.prune_events,
        "best_epoch": ckpt.best_epoch,
        "best_test_loss": ckpt.best_test_loss,
        "meta": ckpt.meta,
    }


def dumps(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    for value in ckpt.arrays.values():
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise LengthMismatch(f"file is {len(data)} bytes, shorter than the fixed prefix")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size + header_len
    if len(data) < start:
        raise LengthMismatch("file truncated inside the header")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    expected = sum(8 * int(np.prod(a["shape"], dtype=np.int64)) for a in header["arrays"])
    if len(data) - start != expected:
        raise LengthMismatch(
            f"shape table declares {expected} blob bytes, file holds {len(data) - start}"
        )
    arrays = {}
    offset = start
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        arrays[spec["name"]] = arr.astype(np.float64).reshape(spec["shape"])
        offset += 8 * count
    return Checkpoint(
        model_config=header["model_config"],
        arrays=arrays,
        pole_ids=header["pole_ids"],
        total_poles=header["total_poles"],
        source=header["source"],
        train_config=header["train_config"],
        prune_events=header["prune_events"],
        best_epoch=header["best_epoch"],
        best_test_loss=header["best_test_loss"],
        meta=header["meta"],
    )


def save(ckpt: Checkpoint, path) -> Path:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dumps(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
