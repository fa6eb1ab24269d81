"""Checkpoint container: named tensors with shared-storage dedup.

Layout (all integers little-endian):

    magic "LCAP", u32 version (1), u16 digest length + config digest (the
    model-shape hash), u64 training step, u32 storage count, then per
    storage: u32 storage id, one tensor record (see tensorfile), u32 CRC32
    of the record payload; then u32 name count, and per name: u16 length +
    UTF-8 name, u32 storage id.

Tensors that share memory in the live model (the word embedding feeds the
trunk, the modulator, and the output head) are written once and re-linked
on load: names pointing at one storage id come back as the same array, and
``load_model`` wires them into a single parameter object.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
import zlib

import numpy as np

from .config import model_digest
from .errors import FormatError, UsageError
from .model import CaptionModel, ModelConfig
from .tensorfile import read_record, write_record

MAGIC = b"LCAP"
VERSION = 1


def save_checkpoint(path, model: CaptionModel) -> None:
    named = list(model.named_parameters())
    storage_ids: dict[int, int] = {}
    storages: list[np.ndarray] = []
    for _, p in named:
        if id(p) not in storage_ids:
            storage_ids[id(p)] = len(storages)
            storages.append(p.data)
    config_blob = json.dumps(dataclasses.asdict(model.config), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        digest = model_digest(model.config).encode()
        fh.write(struct.pack("<H", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<H", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<Q", model.step))
        fh.write(struct.pack("<I", len(storages)))
        for sid, arr in enumerate(storages):
            fh.write(struct.pack("<I", sid))
            buf = io.BytesIO()
            write_record(buf, arr)
            raw = buf.getvalue()
            fh.write(struct.pack("<I", zlib.crc32(raw)))
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<I", len(named)))
        for name, p in named:
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", storage_ids[id(p)]))


def _read(fh, n, what):
    offset = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}", offset=offset)
    return buf


def read_checkpoint(path):
    """Returns (config dict, digest, step, name -> array with sharing intact)."""
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise FormatError("not a checkpoint file (bad magic)", offset=0)
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (dlen,) = struct.unpack("<H", _read(fh, 2, "digest length"))
        digest = _read(fh, dlen, "digest").decode()
        (clen,) = struct.unpack("<H", _read(fh, 2, "config length"))
        config = json.loads(_read(fh, clen, "config").decode())
        (step,) = struct.unpack("<Q", _read(fh, 8, "step"))
        (n_storages,) = struct.unpack("<I", _read(fh, 4, "storage count"))
        storages: dict[int, np.ndarray] = {}
        for _ in range(n_storages):
            (sid,) = struct.unpack("<I", _read(fh, 4, "storage id"))
            (crc,) = struct.unpack("<I", _read(fh, 4, "crc"))
            (nbytes,) = struct.unpack("<Q", _read(fh, 8, "record size"))
            offset = fh.tell()
            raw = _read(fh, nbytes, "tensor record")
            if zlib.crc32(raw) != crc:
                raise FormatError(
                    f"checksum mismatch in storage {sid}", offset=offset
                )
            storages[sid] = read_record(io.BytesIO(raw))
        (n_names,) = struct.unpack("<I", _read(fh, 4, "name count"))
        names: dict[str, int] = {}
        for _ in range(n_names):
            (nlen,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, nlen, "name").decode()
            (sid,) = struct.unpack("<I", _read(fh, 4, "name storage id"))
            names[name] = sid
    arrays = {name: storages[sid] for name, sid in names.items()}
    return config, digest, step, arrays


def load_model(path, expect_config: ModelConfig | None = None,
               force: bool = False) -> CaptionModel:
    """Rebuild a model from a checkpoint; sharing is restored by identity.

    With ``expect_config`` set, a digest mismatch refuses to load unless
    ``force`` is given.
    """
    config_dict, digest, step, arrays = read_checkpoint(path)
    from .config import model_config_from_dict

    config = model_config_from_dict(config_dict)
    if expect_config is not None and model_digest(expect_config) != digest:
        if not force:
            raise UsageError(
                f"checkpoint digest {digest} does not match the run config "
                f"({model_digest(expect_config)}); pass force to override"
            )
        config = expect_config
    model = CaptionModel(config, seed=0)
    model.step = step
    # group names by their storage so shared tensors stay one object
    by_param: dict[int, list[str]] = {}
    for name, p in model.named_parameters():
        by_param.setdefault(id(p), []).append(name)
    seen_params = set()
    for name, p in model.named_parameters():
        if id(p) in seen_params:
            continue
        seen_params.add(id(p))
        if name not in arrays:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != p.shape:
            raise FormatError(
                f"tensor {name!r} has shape {arr.shape}, model expects {p.shape}"
            )
        p.data = np.array(arr, dtype=np.float64)
        # all aliases of this parameter must point at the same storage
        for alias in by_param[id(p)]:
            if alias in arrays and arrays[alias] is not arrays[name]:
                raise FormatError(
                    f"checkpoint stores {alias!r} and {name!r} separately but "
                    "the model shares them"
                )
    return model
