"""Bit-exact checkpoint persistence.

Layout ("DTAC", version 1, little-endian):
    magic 'DTAC' | u32 version | u64 manifest length | manifest (UTF-8 JSON)
    | blob (concatenated float32 tensors in manifest order)

The manifest carries the model config, adapter config, ordered tensor
descriptors {name, shape, offset}, provenance, and the SHA-256 of the
blob. Loading re-validates magic, version, lengths, hash, offsets, and
the tensor schema implied by the config.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ContractError, CorruptionError, DataFormatError, VersionError
from .training import Checkpoint
from .vit import (
    AdaptFormerParams,
    Adapters,
    LoRAParams,
    ModelConfig,
    ViTParams,
    adaptformer_schema,
    lora_schema,
    param_schema,
)

MAGIC = b"DTAC"
VERSION = 1
_HEAD = struct.Struct("<IQ")  # version, manifest length


def _tensor_entries(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    entries = [("params/" + name, arr) for name, arr in ckpt.params.items()]
    if ckpt.adapters is not None:
        entries += [("adapters/" + name, arr) for name, arr in ckpt.adapters.items()]
    return entries


def _blob(ckpt: Checkpoint) -> Tuple[bytes, List[dict]]:
    descriptors = []
    parts = []
    offset = 0
    for name, arr in _tensor_entries(ckpt):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        descriptors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        parts.append(raw)
        offset += len(raw)
    return b"".join(parts), descriptors


def content_hash(ckpt: Checkpoint) -> str:
    """SHA-256 of the serialized tensor blob."""
    blob, _ = _blob(ckpt)
    return hashlib.sha256(blob).hexdigest()


def _adapter_manifest(adapters: Adapters) -> Optional[dict]:
    if adapters is None:
        return None
    if isinstance(adapters, LoRAParams):
        return {"kind": "lora", "rank": adapters.rank, "alpha": adapters.alpha}
    return {"kind": "adaptformer", "bottleneck": adapters.bottleneck, "scale": adapters.scale}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blob, descriptors = _blob(ckpt)
    manifest = {
        "model_config": ckpt.config.to_dict(),
        "adapters": _adapter_manifest(ckpt.adapters),
        "head_classes": ckpt.head_classes,
        "tensors": descriptors,
        "provenance": ckpt.provenance,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "blob_bytes": len(blob),
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEAD.pack(VERSION, len(encoded)))
        fh.write(encoded)
        fh.write(blob)


def _expected_schema(config: ModelConfig, adapter_cfg: Optional[dict]):
    schema = [("params/" + n, tuple(s)) for n, s in param_schema(config)]
    if adapter_cfg is not None:
        if adapter_cfg["kind"] == "lora":
            extra = lora_schema(config, int(adapter_cfg["rank"]))
        elif adapter_cfg["kind"] == "adaptformer":
            extra = adaptformer_schema(config, int(adapter_cfg["bottleneck"]))
        else:
            raise DataFormatError(f"unknown adapter kind '{adapter_cfg['kind']}'")
        schema += [("adapters/" + n, tuple(s)) for n, s in extra]
    return schema


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + _HEAD.size:
        raise CorruptionError(f"{path}: file shorter than header")
    if raw[:4] != MAGIC:
        raise CorruptionError(f"{path}: bad magic {raw[:4]!r}")
    version, mlen = _HEAD.unpack_from(raw, 4)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    start = 4 + _HEAD.size
    if len(raw) < start + mlen:
        raise CorruptionError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptionError(f"{path}: unreadable manifest: {err}") from err
    blob = raw[start + mlen:]
    if len(blob) != manifest["blob_bytes"]:
        raise CorruptionError(
            f"{path}: blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}"
        )
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CorruptionError(f"{path}: blob hash mismatch")

    config = ModelConfig(**manifest["model_config"])
    adapter_cfg = manifest["adapters"]
    schema = _expected_schema(config, adapter_cfg)
    descriptors = manifest["tensors"]
    if len(descriptors) != len(schema):
        raise DataFormatError(
            f"{path}: manifest lists {len(descriptors)} tensors, config implies {len(schema)}"
        )
    tensors: Dict[str, np.ndarray] = {}
    offset = 0
    for desc, (name, shape) in zip(descriptors, schema):
        if desc["name"] != name:
            raise DataFormatError(f"{path}: expected tensor '{name}', found '{desc['name']}'")
        if tuple(desc["shape"]) != shape:
            raise DataFormatError(
                f"{path}: tensor '{name}' has shape {desc['shape']}, expected {list(shape)}"
            )
        if desc["offset"] != offset:
            raise CorruptionError(
                f"{path}: tensor '{name}' at offset {desc['offset']}, expected {offset}"
            )
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
        offset += count * 4
    if offset != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - offset} trailing blob bytes")

    params = ViTParams(
        config, {n[len("params/"):]: t for n, t in tensors.items() if n.startswith("params/")}
    )
    adapters: Adapters = None
    if adapter_cfg is not None:
        adapter_tensors = {
            n[len("adapters/"):]: t for n, t in tensors.items() if n.startswith("adapters/")
        }
        if adapter_cfg["kind"] == "lora":
            adapters = LoRAParams(
                config, int(adapter_cfg["rank"]), float(adapter_cfg["alpha"]), adapter_tensors
            )
        else:
            adapters = AdaptFormerParams(
                config, int(adapter_cfg["bottleneck"]), float(adapter_cfg["scale"]), adapter_tensors
            )
    return Checkpoint(
        config=config,
        params=params,
        adapters=adapters,
        head_classes=int(manifest["head_classes"]),
        provenance=manifest["provenance"],
    )
