"""Parameter checkpoints: ``meta.json`` + ``params.bin`` (float32 LE, CRC32 trailer)."""
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import ChecksumError, DatasetFormatError

FORMAT_VERSION = 1


def _entries(module):
    for name, p in module.named_parameters():
        yield name, p.data, None
    for name, state, attr in module.named_buffers():
        yield name, getattr(state, attr), (state, attr)


def save_checkpoint(module, directory, extra_meta=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names, shapes, chunks = [], [], []
    for name, arr, _ in _entries(module):
        names.append(name)
        shapes.append(list(arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    meta = {"format_version": FORMAT_VERSION, "names": names, "shapes": shapes}
    if extra_meta:
        meta.update(extra_meta)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    (directory / "params.bin").write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def read_meta(directory):
    return json.loads((Path(directory) / "meta.json").read_text())


def load_checkpoint(module, directory):
    directory = Path(directory)
    meta = read_meta(directory)
    raw = (directory / "params.bin").read_bytes()
    if len(raw) < 4:
        raise DatasetFormatError("params.bin too short")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("params.bin checksum mismatch")
    targets = {name: (arr, ref) for name, arr, ref in _entries(module)}
    if list(targets) != meta["names"]:
        raise DatasetFormatError("checkpoint parameter names do not match the model")
    offset = 0
    for name, shape in zip(meta["names"], meta["shapes"]):
        arr, ref = targets[name]
        if list(arr.shape) != shape:
            raise DatasetFormatError(f"shape mismatch for {name}: {arr.shape} vs {shape}")
        n = int(np.prod(shape)) * 4
        values = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=offset).reshape(shape)
        offset += n
        if ref is None:
            arr[...] = values
        else:
            state, attr = ref
            setattr(state, attr, values.astype(np.float64))
    if offset != len(payload):
        raise DatasetFormatError("trailing bytes in params.bin")
    return meta
