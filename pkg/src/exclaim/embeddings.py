"""Frozen per-token embedding matrices: binary store and hash provider.

Store layout (two files):

* data file: bytes 0-3 magic ``EXEB``, bytes 4-7 format version (u32
  little-endian, currently 1), bytes 8-11 the embedding width d_w (u32 LE),
  followed by the raw matrix rows as 32-bit LE floats, row-major.
* index file (``<data path>.idx``): JSONL of ``{"id", "offset", "rows"}``
  where ``offset`` is a byte offset into the raw-row region and therefore
  a multiple of ``4 * d_w``.

Matrices are stored at 32-bit precision and fetched as 64-bit arrays so
downstream gradient checks stay tight. The hash provider generates
deterministic, label-blind vectors for self-contained experiments: a
token always maps to the same row regardless of position or context.
"""

from __future__ import annotations

import json
import struct
import threading
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

MAGIC = b"EXEB"
FORMAT_VERSION = 1
DEFAULT_DIM = 768
_HEADER = struct.Struct("<4sII")

_FNV_PRIME = np.uint64(1099511628211)


def index_path_for(data_path: str | Path) -> Path:
    return Path(str(data_path) + ".idx")


def write_store(entries: Iterable[tuple[str, np.ndarray]], path: str | Path) -> None:
    """Write matrices to a new store; read-back is bit-identical at 32-bit.

    All matrices must share one embedding width and carry unique ids.
    """
    path = Path(path)
    index_lines: list[str] = []
    seen: set[str] = set()
    d_w: int | None = None
    offset = 0
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, 0))  # d_w patched below
        for ident, matrix in entries:
            matrix = np.asarray(matrix)
            if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[1] < 1:
                raise DataError(f"id {ident!r}: embedding matrix must be 2-D and non-empty")
            if d_w is None:
                d_w = int(matrix.shape[1])
            elif matrix.shape[1] != d_w:
                raise DataError(
                    f"id {ident!r}: dimension mismatch (got {matrix.shape[1]}, store has {d_w})"
                )
            if ident in seen:
                raise DataError(f"duplicate id {ident!r} in store entries")
            seen.add(ident)
            rows = int(matrix.shape[0])
            fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
            index_lines.append(json.dumps(
                {"id": ident, "offset": offset, "rows": rows},
                ensure_ascii=False, separators=(",", ":"),
            ))
            offset += rows * 4 * d_w
        if d_w is None:
            raise DataError("cannot write an embedding store with no entries")
        fh.seek(0)
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, d_w))
    index_path_for(path).write_text("\n".join(index_lines) + "\n", encoding="utf-8")


class EmbeddingStore:
    """Random-access reader over a written store. Immutable once opened."""

    def __init__(self, path: Path, d_w: int, index: dict[str, tuple[int, int]], data_size: int):
        self.path = path
        self.d_w = d_w
        self._index = index
        self._data_size = data_size
        self._fh = path.open("rb")
        self._lock = threading.Lock()

    def __contains__(self, ident: str) -> bool:
        return ident in self._index

    def ids(self) -> list[str]:
        return list(self._index)

    def rows(self, ident: str) -> int:
        self._require(ident)
        return self._index[ident][1]

    def fetch(self, ident: str) -> np.ndarray:
        """The stored n x d_w matrix for ``ident``, as float64."""
        self._require(ident)
        offset, rows = self._index[ident]
        nbytes = rows * 4 * self.d_w
        with self._lock:
            self._fh.seek(_HEADER.size + offset)
            raw = self._fh.read(nbytes)
        if len(raw) != nbytes:
            raise DataError(f"store {self.path}: short read for id {ident!r}")
        matrix = np.frombuffer(raw, dtype="<f4").reshape(rows, self.d_w)
        return matrix.astype(np.float64)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "EmbeddingStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _require(self, ident: str) -> None:
        if ident not in self._index:
            raise DataError(f"store {self.path}: unknown embedding id {ident!r}")


def open_store(path: str | Path) -> EmbeddingStore:
    """Open a store for random access, validating header and index bounds."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with path.open("rb") as fh:
            header = fh.read(_HEADER.size)
    except OSError as exc:
        raise DataError(f"cannot open store {path}: {exc}") from None
    if len(header) < _HEADER.size:
        raise DataError(f"store {path}: file too short for a header")
    magic, version, d_w = _HEADER.unpack(header)
    if magic != MAGIC:
        raise DataError(f"store {path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"store {path}: unsupported format version {version}")
    if d_w < 1:
        raise DataError(f"store {path}: invalid embedding width {d_w}")

    data_size = size - _HEADER.size
    row_bytes = 4 * d_w
    index: dict[str, tuple[int, int]] = {}
    ipath = index_path_for(path)
    try:
        lines = ipath.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot open store index {ipath}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            ident, offset, rows = entry["id"], entry["offset"], entry["rows"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise DataError(f"store index {ipath} line {lineno}: malformed entry") from None
        if ident in index:
            raise DataError(f"store index {ipath}: duplicate id {ident!r}")
        if not isinstance(offset, int) or not isinstance(rows, int) or offset < 0 or rows < 1:
            raise DataError(f"store index {ipath}: invalid offset/rows for id {ident!r}")
        if offset % row_bytes != 0:
            raise DataError(
                f"store index {ipath}: offset {offset} for id {ident!r} "
                f"is not a multiple of {row_bytes}"
            )
        if offset + rows * row_bytes > data_size:
            raise DataError(
                f"store index {ipath}: region for id {ident!r} extends past end of data"
            )
        index[ident] = (offset, rows)
    return EmbeddingStore(path=path, d_w=d_w, index=index, data_size=data_size)


def fetch(store: EmbeddingStore, ident: str) -> np.ndarray:
    return store.fetch(ident)


@lru_cache(maxsize=65536)
def _hash_row(token: str, d_w: int, seed: int) -> np.ndarray:
    # FNV-1a 64 over token bytes, continued per column with the 8 LE bytes
    # of the column index and then of the seed; wraparound is intentional.
    h0 = 14695981039346656037
    for byte in token.encode("utf-8"):
        h0 = ((h0 ^ byte) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    h = np.full(d_w, np.uint64(h0), dtype=np.uint64)
    cols = np.arange(d_w, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for shift in range(0, 64, 8):
            h ^= (cols >> np.uint64(shift)) & np.uint64(0xFF)
            h *= _FNV_PRIME
        useed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        for shift in range(0, 64, 8):
            h ^= (useed >> np.uint64(shift)) & np.uint64(0xFF)
            h *= _FNV_PRIME
    row = 2.0 * (h.astype(np.float64) * 2.0 ** -64) - 1.0
    row.flags.writeable = False
    return row


def hash_embed(tokens: Sequence[str], d_w: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-embeddings in [-1, 1); same token, same row.

    Entry (i, j) derives from an FNV-1a 64-bit hash of tokens[i]'s UTF-8
    bytes followed by the little-endian bytes of j and of the seed,
    mapped to 2*(h / 2**64) - 1. Pure in (tokens, d_w, seed).
    """
    if d_w < 1:
        raise DataError(f"embedding width must be >= 1, got {d_w}")
    return np.stack([_hash_row(tok, d_w, seed) for tok in tokens])
