"""Checkpoint files: a JSON manifest plus a flat little-endian float64 blob."""

import json
import logging
import os

import numpy as np

from app.services.network import ModelConfig, ModelParameters, Normalizer

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
BLOB_DTYPE = "<f8"


def blob_path_for(manifest_path) -> str:
    root, _ = os.path.splitext(str(manifest_path))
    return root + ".bin"


def save_checkpoint(params: ModelParameters, normalizer: Normalizer, path, extra: dict | None = None) -> str:
    """Write manifest at path and the weight blob beside it; returns the manifest path."""
    path = str(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    index = {}
    chunks = []
    offset = 0
    for name, arr in params.arrays.items():
        data = np.ascontiguousarray(arr, dtype=BLOB_DTYPE)
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(data.tobytes())
        offset += data.nbytes
    blob = blob_path_for(path)
    with open(blob, "wb") as f:
        f.write(b"".join(chunks))

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": params.config.to_dict(),
        "normalizer": normalizer.to_dict(),
        "blob": os.path.basename(blob),
        "blob_bytes": offset,
        "index": index,
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info(f"Saved checkpoint {path} ({len(index)} arrays, {offset} bytes)")
    return path


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint format_version {version} in {path}")
    return manifest


def dataset_path_of(path) -> str:
    """Dataset directory recorded in a checkpoint at training time."""
    stored = read_manifest(path).get("extra", {}).get("dataset_path")
    if not stored:
        raise ValueError(f"Checkpoint {path} records no dataset path; pass --dataset")
    return stored


def load_checkpoint(path) -> tuple[ModelParameters, Normalizer, dict]:
    manifest = read_manifest(path)
    blob = os.path.join(os.path.dirname(os.path.abspath(path)), manifest["blob"])
    with open(blob, "rb") as f:
        raw = f.read()
    if len(raw) != manifest["blob_bytes"]:
        raise ValueError(f"Checkpoint blob {blob} has {len(raw)} bytes, manifest says {manifest['blob_bytes']}")

    arrays = {}
    # manifest key order is sorted; rebuild in the model's canonical order
    for name, entry in sorted(manifest["index"].items(), key=lambda item: item[1]["offset"]):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(raw, dtype=BLOB_DTYPE, count=count, offset=entry["offset"])
        arrays[name] = values.astype(np.float64).reshape(shape)
    config = ModelConfig.from_dict(manifest["config"])
    return ModelParameters(config, arrays), Normalizer.from_dict(manifest["normalizer"]), manifest
