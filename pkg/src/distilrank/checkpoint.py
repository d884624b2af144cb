"""Versioned checkpoint files and first-k student initialization.

Layout: magic, header length, JSON header (format_version, config,
parameter names + shapes), then the named float64 little-endian blobs in
header order. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import Encoder, EncoderConfig, init_params
from .tensor import Tensor

MAGIC = b"DRCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class IncompatibleShapesError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict  # name -> Tensor
    format_version: int = FORMAT_VERSION

    def to_encoder(self, trainable: bool = True) -> Encoder:
        enc = Encoder(self.config, params=self.params)
        enc.set_trainable(trainable)
        return enc

    @staticmethod
    def from_encoder(enc: Encoder) -> "Checkpoint":
        return Checkpoint(config=enc.config, params=enc.params)


def save_checkpoint(path, ckpt: Checkpoint):
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "params": [
            {"name": name, "shape": list(t.data.shape)}
            for name, t in ckpt.params.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in ckpt.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def _read_header(fh) -> dict:
    magic = fh.read(4)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise CorruptHeaderError("header length missing")
    (hlen,) = struct.unpack("<I", raw)
    blob = fh.read(hlen)
    if len(blob) != hlen:
        raise CorruptHeaderError("header truncated")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"header is not valid JSON: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"unknown format_version {header.get('format_version')!r}"
        )
    return header


def peek_config(path) -> EncoderConfig:
    """Read only the header; the parameter blobs are never touched."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
    return EncoderConfig.from_dict(header["config"])


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise TruncatedBlobError(
                    f"blob for {entry['name']!r} truncated"
                )
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            params[entry["name"]] = Tensor(arr.copy(), requires_grad=True)
    return Checkpoint(
        config=EncoderConfig.from_dict(header["config"]),
        params=params,
        format_version=header["format_version"],
    )


def init_student_from_teacher(
    teacher: Checkpoint, k: int, student_config: EncoderConfig, seed: int = 0
) -> Checkpoint:
    """Copy embeddings and the teacher's first k layers into a fresh student.

    The classification head (pooler + classifier) is freshly initialized.
    Requires identical hidden widths; cross-width students must instead be
    trained with the projection-based intermediate losses.
    """
    if k > teacher.config.num_layers:
        raise ValueError(
            f"k={k} exceeds teacher depth {teacher.config.num_layers}"
        )
    if k != student_config.num_layers:
        raise ValueError(
            f"k={k} does not match student depth {student_config.num_layers}"
        )
    if student_config.hidden_size != teacher.config.hidden_size:
        raise IncompatibleShapesError(
            f"student hidden size {student_config.hidden_size} != teacher "
            f"{teacher.config.hidden_size}; use distillation with "
            "projections instead of first-k initialization"
        )
    params = init_params(student_config, seed=seed)
    for name, src in teacher.params.items():
        copy = False
        if name.startswith("embeddings."):
            copy = True
        elif name.startswith("layer"):
            idx = int(name.split(".")[0][len("layer"):])
            copy = idx < k
        if copy:
            if params[name].data.shape != src.data.shape:
                raise IncompatibleShapesError(
                    f"parameter {name}: student shape "
                    f"{params[name].data.shape} != teacher {src.data.shape}"
                )
            params[name] = Tensor(src.data.copy(), requires_grad=True)
    return Checkpoint(config=student_config, params=params)
