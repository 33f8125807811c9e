"""Little-endian named-tensor container shared by weight and capture files.

Layout::

    magic[4]  version:u32  [extra header]  count:u32
    count x ( name_len:u32  name:utf8  rank:u32  dims:u32*rank  data:f64*prod(dims) )

The extra header is empty for weight files; capture files put their loss kind,
fingerprint and class count there.
"""

import struct

import numpy as np

from .errors import FormatError, VersionError

VERSION = 1


def pack_entries(entries):
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


class Reader:
    """Cursor over a byte buffer that reports the offset of any failure."""

    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]


def write(path, magic, entries, header=b""):
    blob = magic + struct.pack("<I", VERSION) + header + pack_entries(entries)
    with open(path, "wb") as fh:
        fh.write(blob)


def open_reader(path, magic):
    with open(path, "rb") as fh:
        buf = fh.read()
    r = Reader(buf)
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (this build reads {VERSION})", 4)
    return r


def read_entries(r):
    count = r.u32("entry count")
    entries = []
    for _ in range(count):
        start = r.pos
        nlen = r.u32("name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not valid UTF-8", start + 4) from exc
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * n, f"data of '{name}'"), dtype="<f8")
        entries.append((name, data.astype(np.float64).reshape(dims)))
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last entry", r.pos)
    return entries
