"""Little-endian writers/readers for the GFE1 container and GFP1 prompt file.

Byte layout mirrors `drgrade::io`; the CRC32 covers everything before it.
"""

import struct
import zlib

import numpy as np

CONTAINER_MAGIC = b"GFE1"
PROMPT_MAGIC = b"GFP1"
VERSION = 1
NUM_GRADES = 5

KIND_GLOBAL, KIND_FEATURE_MAP, KIND_TENSOR = 0, 1, 2
_RANK = {KIND_GLOBAL: (1,), KIND_FEATURE_MAP: (3,), KIND_TENSOR: range(1, 9)}


def _kind_for(arr):
    return {1: KIND_GLOBAL, 3: KIND_FEATURE_MAP}.get(arr.ndim, KIND_TENSOR)


def container_bytes(entries, meta):
    """`entries`: ordered (id, array) pairs; arrays are stored as f32."""
    meta_b = meta.encode("utf-8")
    head = bytearray(CONTAINER_MAGIC)
    head += struct.pack("<III", VERSION, len(entries), len(meta_b))
    head += meta_b
    payload = bytearray()
    seen = set()
    for eid, arr in entries:
        if eid in seen:
            raise ValueError(f"duplicate entry id {eid!r}")
        seen.add(eid)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        kind = _kind_for(arr)
        if arr.ndim not in _RANK[kind] or 0 in arr.shape:
            raise ValueError(f"entry {eid!r}: invalid shape {arr.shape}")
        id_b = eid.encode("utf-8")
        head += struct.pack("<H", len(id_b)) + id_b
        head += struct.pack("<BB", kind, arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape)
        head += struct.pack("<QQ", len(payload), arr.nbytes)
        payload += arr.tobytes()
    head += struct.pack("<Q", len(payload))
    body = bytes(head + payload)
    return body + struct.pack("<I", zlib.crc32(body))


def write_container(path, entries, meta="{}"):
    with open(path, "wb") as f:
        f.write(container_bytes(entries, meta))


def _check_crc(data):
    if len(data) < 4:
        raise ValueError("truncated")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise ValueError("checksum mismatch")


def read_container(path):
    """Returns (meta, [(id, array)])."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CONTAINER_MAGIC:
        raise ValueError("bad magic")
    _check_crc(data)
    version, n, meta_len = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    pos = 16
    meta = data[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    index = []
    for _ in range(n):
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        eid = data[pos:pos + id_len].decode("utf-8")
        pos += id_len
        _kind, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        offset, length = struct.unpack_from("<QQ", data, pos)
        pos += 16
        index.append((eid, shape, offset, length))
    pos += 8
    out = []
    for eid, shape, offset, length in index:
        raw = data[pos + offset:pos + offset + length]
        out.append((eid, np.frombuffer(raw, dtype="<f4").reshape(shape).copy()))
    return meta, out


def prompt_bytes(texts, rows):
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if len(texts) != NUM_GRADES or rows.ndim != 2 or rows.shape[0] != NUM_GRADES:
        raise ValueError(f"need exactly {NUM_GRADES} prompts, got {len(texts)}")
    if rows.shape[1] == 0:
        raise ValueError("zero-dimensional prompt embeddings")
    if not np.all(np.isfinite(rows)) or np.any(np.all(rows == 0, axis=1)):
        raise ValueError("prompt rows must be finite and non-zero")
    out = bytearray(PROMPT_MAGIC)
    out += struct.pack("<III", VERSION, NUM_GRADES, rows.shape[1])
    for text, row in zip(texts, rows):
        tb = text.encode("utf-8")
        out += struct.pack("<I", len(tb)) + tb + row.tobytes()
    body = bytes(out)
    return body + struct.pack("<I", zlib.crc32(body))


def write_prompt_file(path, texts, rows):
    with open(path, "wb") as f:
        f.write(prompt_bytes(texts, rows))


def read_prompt_file(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != PROMPT_MAGIC:
        raise ValueError("bad magic")
    _check_crc(data)
    _version, n, dim = struct.unpack_from("<III", data, 4)
    pos = 16
    texts, rows = [], []
    for _ in range(n):
        (tl,) = struct.unpack_from("<I", data, pos)
        pos += 4
        texts.append(data[pos:pos + tl].decode("utf-8"))
        pos += tl
        rows.append(np.frombuffer(data[pos:pos + 4 * dim], dtype="<f4"))
        pos += 4 * dim
    return texts, np.stack(rows)
