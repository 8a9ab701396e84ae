"""
Versioned binary checkpoints.

Layout (little-endian):

    "PCKP" | version u8 | header length u32 | JSON header | float64 blobs

The JSON header holds the codec config, free-form metadata and, per array,
its name, shape and byte offset into the blob section. Keys are sorted and
no timestamps are written, so saving the same state twice yields the same
bytes.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from autodiff import ParameterStore
from errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"PCKP"
VERSION = 1
_PREFIX = struct.Struct("<4sBI")


@dataclass
class CheckpointData:
    config: dict
    meta: dict
    arrays: dict[str, np.ndarray]


def store_state(store: ParameterStore, prefix: str) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    for name, p in store.params.items():
        arrays[f"{prefix}/param/{name}"] = p.value
        arrays[f"{prefix}/adam_m/{name}"] = store.first_moments[name]
        arrays[f"{prefix}/adam_v/{name}"] = store.second_moments[name]
    return arrays, {"step_count": store.step_count, "frozen": sorted(store.frozen)}


def restore_store(store: ParameterStore, prefix: str, arrays: dict[str, np.ndarray], meta: dict):
    for name, p in store.params.items():
        key = f"{prefix}/param/{name}"
        if key not in arrays:
            raise FormatError(f"checkpoint is missing parameter {name}")
        if arrays[key].shape != p.value.shape:
            raise FormatError(f"checkpoint parameter {name} has shape {arrays[key].shape}, model expects {p.value.shape}")
        p.value = arrays[key].copy()
        store.first_moments[name] = arrays[f"{prefix}/adam_m/{name}"].copy()
        store.second_moments[name] = arrays[f"{prefix}/adam_v/{name}"].copy()
    store.step_count = int(meta["step_count"])
    store.frozen = set(meta["frozen"])


def write_checkpoint(path: str | Path, data: CheckpointData):
    entries, blobs, offset = [], [], 0
    for name in sorted(data.arrays):
        array = np.ascontiguousarray(data.arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        blobs.append(array.tobytes())
        offset += array.nbytes
    header = json.dumps({"config": data.config, "meta": data.meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(_PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs))
    except OSError as e:
        raise ConfigError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Wrote checkpoint {path} ({len(entries)} arrays, {offset} bytes of weights)")


def read_checkpoint(path: str | Path) -> CheckpointData:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")

    body = _PREFIX.size + header_len
    try:
        header = json.loads(raw[_PREFIX.size: body])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint header: {e}") from e

    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = body + entry["offset"]
        if start + 8 * count > len(raw):
            raise FormatError(f"{path}: truncated checkpoint data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start) \
            .reshape(entry["shape"]).astype(np.float64)
    return CheckpointData(config=header["config"], meta=header["meta"], arrays=arrays)
