"""Single-file model checkpoints.

Layout::

    SURVPLANES-CHECKPOINT <version>\\n
    <one-line JSON header, sorted keys>\\n
    <payload: little-endian float64 arrays, back to back>

The header carries the training config, history digest, seed lineage and an
array manifest (name, shape, float offset). Writing is deterministic, so a
save/load/save round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .encoder import EncoderParams
from .exceptions import CheckpointError
from .head import Calibrator, HyperplaneHead
from .trainer import Model, TrainConfig

MAGIC = "SURVPLANES-CHECKPOINT"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def _arrays(model: Model) -> dict:
    arrays = dict(model.named_arrays())
    if model.calibrator is not None:
        arrays["calibrator.knot_risks"] = model.calibrator.knot_risks
        arrays["calibrator.knot_values"] = model.calibrator.knot_values
        arrays["calibrator.coefficients"] = model.calibrator.coefficients
    return arrays


def to_bytes(model: Model) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in _arrays(model).items():
        arr = np.asarray(arr, dtype=float)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.astype(_DTYPE).tobytes(order="C"))
        offset += arr.size
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "layer_sizes": model.encoder.layer_sizes,
        "has_calibrator": model.calibrator is not None,
        "history_digest": model.history_digest,
        "seed_lineage": [int(s) for s in model.seed_lineage],
        "arrays": manifest,
        "payload_floats": offset,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = f"{MAGIC} {FORMAT_VERSION}\n{json.dumps(header, sort_keys=True)}\n"
    return head.encode("utf-8") + payload


def from_bytes(data: bytes) -> Model:
    try:
        first_nl = data.index(b"\n")
        second_nl = data.index(b"\n", first_nl + 1)
    except ValueError:
        raise CheckpointError("truncated checkpoint header") from None
    magic = data[:first_nl].decode("utf-8", "replace").split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError("not a survplanes checkpoint")
    if magic[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {magic[1]}")
    try:
        header = json.loads(data[first_nl + 1:second_nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    payload = data[second_nl + 1:]
    if len(payload) != header["payload_floats"] * _DTYPE.itemsize:
        raise CheckpointError("payload size does not match header")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch")
    flat = np.frombuffer(payload, dtype=_DTYPE)
    arrays = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"], dtype=int))
        start = entry["offset"]
        arrays[entry["name"]] = flat[start:start + size].reshape(entry["shape"]).astype(float)
    try:
        encoder = EncoderParams.from_named(arrays)
        head = HyperplaneHead.from_named(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"inconsistent parameters: {exc}") from None
    if encoder.layer_sizes != header["layer_sizes"] or head.embedding_dim != encoder.output_dim:
        raise CheckpointError("parameter shapes disagree with the declared layer sizes")
    calibrator = None
    if header["has_calibrator"]:
        calibrator = Calibrator(arrays["calibrator.knot_risks"],
                                arrays["calibrator.knot_values"],
                                arrays["calibrator.coefficients"])
    config = TrainConfig.from_dict(header["config"])
    return Model(config, encoder, head, calibrator, header["history_digest"],
                 tuple(header["seed_lineage"]))


def save(model: Model, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    os.replace(tmp, path)


def load(path) -> Model:
    return from_bytes(Path(path).read_bytes())
