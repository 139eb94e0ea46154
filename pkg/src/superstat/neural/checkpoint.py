"""Versioned binary checkpoint for trained networks.

Layout::

    8 bytes   magic b"SSTATNN\\0"
    4 bytes   little-endian uint32 header length n
    n bytes   UTF-8 JSON header
    rest      float64 little-endian weights, concatenated in PARAM_ORDER

The header records the format version, the model specification and its
digest, network dimensions and the training configuration.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..generative import ModelSpec
from .amortizer import Amortizer
from .network import NetworkConfig, NetworkWeights

MAGIC = b"SSTATNN\0"
FORMAT_VERSION = 3


class CheckpointError(ValueError):
    pass


def save_checkpoint(amortizer: Amortizer, path: str | Path) -> Path:
    path = Path(path)
    cfg = amortizer.weights.config
    header = {
        "format_version": FORMAT_VERSION,
        "spec_digest": amortizer.spec.digest(),
        "spec": amortizer.spec.to_dict(),
        "network": cfg.to_dict(),
        "count_scale": amortizer.count_scale,
        "training": amortizer.train_config,
        "n_weights": int(amortizer.weights.flat().size),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(amortizer.weights.flat().astype("<f8").tobytes())
    tmp.replace(path)
    return path


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _header(fh, path)


def _header(fh, path) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a network checkpoint")
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    return header


def load_checkpoint(path: str | Path, expect_spec: ModelSpec | None = None) -> Amortizer:
    """Read a checkpoint; with ``expect_spec`` a digest mismatch is an error."""
    with open(path, "rb") as fh:
        header = _header(fh, path)
        raw = fh.read()
    vec = np.frombuffer(raw, dtype="<f8").astype(float)
    if vec.size != header["n_weights"]:
        raise CheckpointError(f"{path}: expected {header['n_weights']} weights, found {vec.size}")
    spec = ModelSpec.from_dict(header["spec"])
    if spec.digest() != header["spec_digest"]:
        raise CheckpointError(f"{path}: embedded model specification does not match its digest")
    if expect_spec is not None and expect_spec.digest() != header["spec_digest"]:
        raise CheckpointError(
            f"{path}: network was trained on model {header['spec_digest']}, not {expect_spec.digest()}"
        )
    weights = NetworkWeights.from_flat(NetworkConfig(**header["network"]), vec)
    return Amortizer(spec, weights, float(header["count_scale"]), header.get("training", {}))
