"""Binary model snapshots.

Layout: an 8-byte magic string, a little-endian uint32 manifest length, a
JSON manifest, then raw little-endian IEEE-754 tensor blobs, concatenated
in the order the manifest's tensor directory lists them. Blob offsets are
relative to the end of the manifest. Serialization is deterministic: the
same model always produces the same bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import Encoder, EncoderConfig
from .heads import OpenSetHead
from .numcore import BatchNormState, OptimizerState, Tensor

MAGIC = b"ABMCKPT1"
VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """Base for malformed or inconsistent snapshot files."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the snapshot magic string."""


class CheckpointVersionError(CheckpointError):
    """The snapshot declares a version this reader does not understand."""


class TruncatedCheckpointError(CheckpointError):
    """The file ends before the manifest or a tensor blob does."""


@dataclass
class Checkpoint:
    encoder: Encoder
    head: OpenSetHead
    optimizer: OptimizerState | None
    metadata: dict


def _dtype_name(arr: np.ndarray) -> str:
    name = arr.dtype.name
    if name not in _DTYPE_CODES:
        raise CheckpointError(f"cannot serialize dtype {name}; use float32 or float64")
    return name


def _collect_tensors(
    encoder: Encoder, head: OpenSetHead, optimizer: OptimizerState | None
) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    for name in sorted(encoder.params):
        entries.append((f"param.{name}", encoder.params[name].data))
    for key in sorted(encoder.bn_states):
        state = encoder.bn_states[key]
        entries.append((f"bn.{key}.mean", state.mean))
        entries.append((f"bn.{key}.var", state.var))
    entries.append(("head.tau", head.tau.data))
    entries.append(("head.log_scale", head.log_scale.data))
    if optimizer is not None:
        for name in sorted(optimizer.m):
            entries.append((f"optim.m.{name}", optimizer.m[name]))
        for name in sorted(optimizer.v):
            entries.append((f"optim.v.{name}", optimizer.v[name]))
    return entries


def save_checkpoint(
    path: str,
    encoder: Encoder,
    head: OpenSetHead,
    optimizer: OptimizerState | None = None,
    metadata: dict | None = None,
) -> None:
    entries = _collect_tensors(encoder, head, optimizer)
    directory = []
    blobs = []
    offset = 0
    for name, arr in entries:
        dtype = _dtype_name(arr)
        blob = np.ascontiguousarray(arr).astype(_DTYPE_CODES[dtype], copy=False).tobytes()
        directory.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "length": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    manifest = {
        "version": VERSION,
        "encoder": encoder.config.to_dict(),
        "encoder_dtype": np.dtype(encoder.dtype).name,
        "bn": {
            key: {"momentum": state.momentum, "initialized": state.initialized}
            for key, state in sorted(encoder.bn_states.items())
        },
        "optimizer": None
        if optimizer is None
        else {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "lr_decay": optimizer.lr_decay,
            "step_count": optimizer.step_count,
        },
        "metadata": metadata or {},
        "tensors": directory,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest_bytes)))
        f.write(manifest_bytes)
        for blob in blobs:
            f.write(blob)


def _read_manifest(raw: bytes, path: str) -> tuple[dict, int]:
    if len(raw) < len(MAGIC) + 4:
        raise TruncatedCheckpointError(f"{path}: file shorter than the fixed header")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[: len(MAGIC)]!r}")
    (manifest_len,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    blob_start = len(MAGIC) + 4 + manifest_len
    if len(raw) < blob_start:
        raise TruncatedCheckpointError(f"{path}: manifest promises {manifest_len} bytes, file is shorter")
    try:
        manifest = json.loads(raw[len(MAGIC) + 4 : blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {e}") from e
    version = manifest.get("version")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: snapshot version {version!r}, reader supports {VERSION}")
    return manifest, blob_start


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    manifest, blob_start = _read_manifest(raw, path)

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        dtype = entry["dtype"]
        if dtype not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype {dtype!r}")
        lo = blob_start + entry["offset"]
        hi = lo + entry["length"]
        if hi > len(raw):
            raise TruncatedCheckpointError(f"{path}: tensor {name!r} blob runs past the end of the file")
        arr = np.frombuffer(raw[lo:hi], dtype=_DTYPE_CODES[dtype])
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(
                f"{path}: tensor {name!r} holds {arr.size} elements, shape {entry['shape']} needs {expected}"
            )
        arrays[name] = arr.reshape(entry["shape"]).astype(dtype, copy=True)

    def pop(name: str) -> np.ndarray:
        if name not in arrays:
            raise CheckpointError(f"{path}: manifest lists no tensor named {name!r}")
        return arrays.pop(name)

    config = EncoderConfig.from_dict(manifest["encoder"])
    dtype = np.dtype(manifest["encoder_dtype"])
    params = {
        name[len("param.") :]: Tensor(arrays[name], requires_grad=True)
        for name in sorted(arrays)
        if name.startswith("param.")
    }
    for name in list(arrays):
        if name.startswith("param."):
            del arrays[name]

    bn_states = {}
    for key, info in manifest["bn"].items():
        state = BatchNormState(
            mean=pop(f"bn.{key}.mean"),
            var=pop(f"bn.{key}.var"),
            momentum=info["momentum"],
            initialized=bool(info["initialized"]),
        )
        bn_states[key] = state
    encoder = Encoder(config=config, params=params, bn_states=bn_states, dtype=dtype)

    head = OpenSetHead(
        tau=Tensor(pop("head.tau"), requires_grad=True),
        log_scale=Tensor(pop("head.log_scale"), requires_grad=True),
    )

    optimizer = None
    opt_info = manifest.get("optimizer")
    if opt_info is not None:
        m = {name[len("optim.m.") :]: arrays.pop(name) for name in sorted(arrays) if name.startswith("optim.m.")}
        v = {name[len("optim.v.") :]: arrays.pop(name) for name in sorted(arrays) if name.startswith("optim.v.")}
        optimizer = OptimizerState(
            lr=opt_info["lr"],
            beta1=opt_info["beta1"],
            beta2=opt_info["beta2"],
            eps=opt_info["eps"],
            weight_decay=opt_info["weight_decay"],
            lr_decay=opt_info["lr_decay"],
            step_count=opt_info["step_count"],
            m=m,
            v=v,
        )

    if arrays:
        raise CheckpointError(f"{path}: unexpected tensors in directory: {sorted(arrays)[:5]}")
    return Checkpoint(encoder=encoder, head=head, optimizer=optimizer, metadata=manifest["metadata"])
