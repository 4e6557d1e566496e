"""Binary container formats for vectors and codebooks.

Raw vector file (UTKV): magic "UTKV", u32 count, u32 dim, then count*dim
little-endian IEEE-754 float32 in row-major order.

Codebook container (UTKQ): magic "UTKQ", u32 version=1, u32 scheme
(0=VQ, 1=MCQ, 2=RQ), u32 d, u32 n, then per codebook: u32 K, u32 c,
K*c little-endian float32 row-major.

All integers are little-endian unsigned 32-bit. Writes are atomic (temp file
plus rename) so a failed command leaves no partial artifact behind.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import FormatError
from .quantize import Codebook, MultiCodebookQuantizer, ResidualQuantizer

MAGIC_VECTORS = b"UTKV"
MAGIC_CODEBOOKS = b"UTKQ"
UTKQ_VERSION = 1
SCHEME_VQ, SCHEME_MCQ, SCHEME_RQ = 0, 1, 2


def atomic_write(path, data: bytes):
    """Write `data` to `path` via a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    """Byte cursor that reports the offset of any malformed field."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at byte {self.off}"
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def expect_end(self):
        if self.off != len(self.data):
            raise FormatError(
                f"{self.path}: {len(self.data) - self.off} trailing bytes at byte {self.off}"
            )


def encode_vectors(x) -> bytes:
    arr = np.ascontiguousarray(x, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError(f"vector payload must be 2-d, got shape {arr.shape}")
    head = MAGIC_VECTORS + struct.pack("<II", arr.shape[0], arr.shape[1])
    return head + arr.tobytes()


def decode_vectors(data: bytes, path="<bytes>") -> np.ndarray:
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != MAGIC_VECTORS:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC_VECTORS!r}")
    count = r.u32("count")
    dim = r.u32("dim")
    payload = r.take(count * dim * 4, "float payload")
    r.expect_end()
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)


def save_vectors(path, x):
    atomic_write(path, encode_vectors(x))


def load_vectors(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_vectors(f.read(), path=str(path))


def _codebook_sections(codebooks) -> bytes:
    out = bytearray()
    for cb in codebooks:
        e = np.ascontiguousarray(cb.entries, dtype="<f4")
        out += struct.pack("<II", e.shape[0], e.shape[1])
        out += e.tobytes()
    return bytes(out)


def encode_codebooks(obj) -> bytes:
    """Serialize a Codebook (VQ), MultiCodebookQuantizer, or ResidualQuantizer."""
    if isinstance(obj, Codebook):
        scheme, d, books = SCHEME_VQ, obj.code_dim, [obj]
    elif isinstance(obj, MultiCodebookQuantizer):
        scheme, d, books = SCHEME_MCQ, obj.token_dim, obj.sub_codebooks
    elif isinstance(obj, ResidualQuantizer):
        scheme, d, books = SCHEME_RQ, obj.token_dim, obj.levels
    else:
        raise FormatError(f"cannot serialize {type(obj).__name__} as codebooks")
    head = MAGIC_CODEBOOKS + struct.pack("<IIII", UTKQ_VERSION, scheme, d, len(books))
    return head + _codebook_sections(books)


def decode_codebooks(data: bytes, path="<bytes>"):
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != MAGIC_CODEBOOKS:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC_CODEBOOKS!r}")
    version = r.u32("version")
    if version != UTKQ_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    scheme = r.u32("scheme")
    d = r.u32("d")
    n = r.u32("n")
    books = []
    for j in range(n):
        k = r.u32(f"codebook {j} K")
        c = r.u32(f"codebook {j} c")
        payload = r.take(k * c * 4, f"codebook {j} entries")
        entries = np.frombuffer(payload, dtype="<f4").reshape(k, c).astype(np.float32)
        books.append(Codebook.from_entries(entries))
    r.expect_end()

    if scheme == SCHEME_VQ:
        if n != 1 or books[0].code_dim != d:
            raise FormatError(f"{path}: VQ file must hold one codebook of dim {d}")
        return books[0]
    if scheme == SCHEME_MCQ:
        return MultiCodebookQuantizer(sub_codebooks=books, token_dim=d)
    if scheme == SCHEME_RQ:
        # n identical sections round-trip a shared codebook
        first = books[0].entries
        if n > 1 and all(np.array_equal(b.entries, first) for b in books[1:]):
            return ResidualQuantizer.with_shared_codebook(books[0], n)
        return ResidualQuantizer(levels=books, shared=False)
    raise FormatError(f"{path}: unknown scheme {scheme}")


def save_codebooks(path, obj):
    atomic_write(path, encode_codebooks(obj))


def load_codebooks(path):
    with open(path, "rb") as f:
        return decode_codebooks(f.read(), path=str(path))
