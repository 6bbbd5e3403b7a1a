"""Checkpoints: a JSON manifest next to one little-endian float32 blob.

``<stem>.json`` lists every array's name, shape, byte offset and length,
plus the generator config and free-form metadata; ``<stem>.bin`` holds the
raw data in manifest order.  Manifests carry no timestamps, so identical
states produce byte-identical files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from lapgsr.errors import DataError, ShapeError
from lapgsr.model import Generator, GeneratorConfig

FORMAT = "lapgsr-checkpoint"
VERSION = 1
GENERATOR_PREFIX = "generator."


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def save_checkpoint(path, arrays: dict[str, np.ndarray], generator_config: GeneratorConfig,
                    meta: dict | None = None) -> Path:
    """Write ``arrays`` (name -> array) and return the manifest path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob_path = stem.with_suffix(".bin")
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(np.shape(arr)),
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "blob": blob_path.name,
        "dtype": "float32-le",
        "generator_config": generator_config.to_dict(),
        "tensors": entries,
        "meta": meta or {},
    }
    manifest_path = stem.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    stem = _stem(path)
    manifest_path = stem.with_suffix(".json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DataError(f"checkpoint manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint manifest {manifest_path} is not valid JSON: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise DataError(f"{manifest_path} is not a {FORMAT} manifest")
    blob_path = manifest_path.parent / manifest["blob"]
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint blob not found: {blob_path}") from None
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["nbytes"] != 4 * count or entry["offset"] + entry["nbytes"] > len(blob):
            raise DataError(f"{manifest_path}: entry {entry['name']} is inconsistent with the blob")
        arrays[entry["name"]] = (np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
                                 .reshape(shape).astype(np.float32))
    return arrays, manifest


def save_generator(path, generator: Generator, meta: dict | None = None) -> Path:
    arrays = {GENERATOR_PREFIX + k: v for k, v in generator.state_arrays().items()}
    return save_checkpoint(path, arrays, generator.cfg, meta)


def load_generator(path) -> Generator:
    """Rebuild a generator from any checkpoint holding ``generator.*`` tensors.

    Every stored shape is validated against the manifest's config.
    """
    arrays, manifest = load_checkpoint(path)
    try:
        cfg = GeneratorConfig.from_dict(manifest["generator_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad generator config: {exc}") from None
    gen = Generator(cfg)
    stored = {k[len(GENERATOR_PREFIX):]: v for k, v in arrays.items()
              if k.startswith(GENERATOR_PREFIX)}
    try:
        gen.load_arrays(stored)
    except ShapeError as exc:
        raise DataError(f"{path}: checkpoint does not match its config: {exc}") from None
    return gen
