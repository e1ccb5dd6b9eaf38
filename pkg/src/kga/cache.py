"""Offline cache of triple encodings.

Entries are keyed by ``(model checksum, sha256 of the triple text)``. On disk
each entry is ``<dir>/<checksum[:16]>/<text sha256>.kgt``:

    b"KGT1"
    int64 LE x4: num_layers, num_heads, M, head_dim
    int64 LE x M: token ids
    per layer, float64 LE: hidden [M, H*dh], queries, keys, values [H, M, dh],
                           last-token weights [H, M]
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import threading
from pathlib import Path

import numpy as np

from .fusion import TripleEncoding, encode_triple
from .model import Model

MAGIC = b"KGT1"
CACHE_ENV = "KGA_CACHE_DIR"


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def encoding_to_bytes(enc: TripleEncoding) -> bytes:
    L = enc.num_layers
    H, M, dh = enc.keys[0].shape
    parts = [MAGIC, struct.pack("<4q", L, H, M, dh),
             np.asarray(enc.tokens, dtype="<i8").tobytes()]
    for l in range(L):
        for a in (enc.hidden[l], enc.queries[l], enc.keys[l], enc.values[l], enc.last_weights[l]):
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def encoding_from_bytes(blob: bytes, triple_id: int = -1) -> TripleEncoding:
    if blob[:4] != MAGIC:
        raise ValueError("not a KGT1 cache entry")
    L, H, M, dh = struct.unpack_from("<4q", blob, 4)
    off = 4 + 32
    tokens = np.frombuffer(blob, "<i8", M, off).astype(np.int64)
    off += 8 * M

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        a = np.frombuffer(blob, "<f8", n, off).astype(np.float64).reshape(shape)
        off += 8 * n
        a.setflags(write=False)
        return a

    hidden, qs, ks, vs, ws = [], [], [], [], []
    for _ in range(L):
        hidden.append(take((M, H * dh)))
        qs.append(take((H, M, dh)))
        ks.append(take((H, M, dh)))
        vs.append(take((H, M, dh)))
        ws.append(take((H, M)))
    if off != len(blob):
        raise ValueError("cache entry has trailing bytes")
    tokens.setflags(write=False)
    return TripleEncoding(triple_id, tokens, hidden, qs, ks, vs, ws)


class TripleCache:
    """Thread-safe memory cache with an optional directory behind it."""

    def __init__(self, model: Model, directory=None):
        self.model = model
        self.checksum = model.checksum()
        if directory is None:
            directory = os.environ.get(CACHE_ENV)
        self.directory = Path(directory) / self.checksum[:16] if directory else None
        self._mem: dict[str, TripleEncoding] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path | None:
        return None if self.directory is None else self.directory / f"{key}.kgt"

    def get(self, text: str, tokens, triple_id: int = -1) -> TripleEncoding:
        key = text_key(text)
        enc = self._mem.get(key)
        if enc is None:
            path = self._path(key)
            if path is not None and path.exists():
                enc = encoding_from_bytes(path.read_bytes())
            else:
                enc = encode_triple(self.model, tokens)
                self._write(path, enc)
            with self._lock:
                enc = self._mem.setdefault(key, enc)
            self.misses += 1
        else:
            self.hits += 1
        return enc.with_id(triple_id)

    def _write(self, path: Path | None, enc: TripleEncoding) -> None:
        if path is None:
            return
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "wb") as fh:
                fh.write(encoding_to_bytes(enc))
            os.replace(tmp, path)
