"""Binary parameter checkpoints.

Layout (all integers little-endian):
  bytes 0-7   magic string ``MFCHKPT1``
  uint32      length of the UTF-8 JSON config block
  bytes       config JSON
  uint32      tensor count
  per tensor: uint16 name length, UTF-8 name, uint8 ndim,
              ndim x int64 dimension sizes, float64 values (row-major)
"""

import json
import struct

import numpy as np

MAGIC = b"MFCHKPT1"


def save_checkpoint(path, config, tensors):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, values in tensors.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(values, dtype="<f8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<q", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (config_len,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(config_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(
                struct.unpack("<q", fh.read(8))[0] for _ in range(ndim)
            )
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(shape)
            tensors[name] = data.astype(np.float64)
        return config, tensors
