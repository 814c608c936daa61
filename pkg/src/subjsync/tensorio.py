"""Raw tensor dumps (.ssyn) and binary PGM masks."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from subjsync.errors import ShapeError

MAGIC = b"SSYN"
VERSION = 1


def dumps_tensor(arr) -> bytes:
    a = np.asarray(arr, dtype="<f8")
    head = MAGIC + struct.pack("<II", VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def loads_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ShapeError("not an SSYN tensor dump")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ShapeError(f"unsupported SSYN version {version}")
    off = 12 + 8 * rank
    if len(buf) < off:
        raise ShapeError("truncated SSYN header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != 8 * count:
        raise ShapeError(f"SSYN payload is {len(buf) - off} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=off).astype(np.float64).reshape(dims)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(dumps_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())


def write_pgm(path, mask, height: int, width: int) -> None:
    """Binary P5 PGM: 0 for background, 255 for subject."""
    m = np.asarray(mask, dtype=bool).reshape(height, width)
    pix = np.where(m, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (width, height))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ShapeError("not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ShapeError("16-bit PGM not supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos + 1)
    return pix.reshape(height, width)
