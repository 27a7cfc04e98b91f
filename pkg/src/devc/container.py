"""Bitstream container: fixed header plus five length-prefixed payloads.

Layout (big endian):

  magic   4 bytes  "DEVC"
  version u8       currently 1
  width   u16      luma width  (before padding)
  height  u16      luma height (before padding)
  pad_r   u8       luma right padding to the coding multiple (16)
  pad_b   u8       luma bottom padding
  mode    u8       0 = motion compensated, 1 = bypass
  5 x [ length u32, serialized Payload of that many bytes ]

Directory order is fixed: mv, mv_hyper, y_res, u_res, v_res.  A zero length
marks an absent stream; bypass streams have absent mv and mv_hyper entries
and motion-compensated streams have them present, on both write and read.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Optional

from .coder import Payload
from .errors import GeometryError, ProtocolError

MAGIC = b"DEVC"
VERSION = 1
PAD_MULTIPLE = 16
ENTRY_ORDER = ("mv", "mv_hyper", "y_res", "u_res", "v_res")
MODE_MC = "mc"
MODE_BYPASS = "bypass"
_MODE_CODES = {MODE_MC: 0, MODE_BYPASS: 1}
_MODE_NAMES = {0: MODE_MC, 1: MODE_BYPASS}


def expected_pads(width: int, height: int) -> tuple:
    return (-width) % PAD_MULTIPLE, (-height) % PAD_MULTIPLE


@dataclass
class Bitstream:
    """Parsed in-memory form of one coded frame."""

    width: int
    height: int
    mode: str
    entries: Dict[str, Optional[Payload]]

    def __post_init__(self):
        if not (0 < self.width < 65536 and 0 < self.height < 65536):
            raise GeometryError(f"frame size {self.width}x{self.height} outside u16 range")
        if self.width % 2 or self.height % 2:
            raise GeometryError(f"frame size {self.width}x{self.height} must be even")
        if self.mode not in _MODE_CODES:
            raise ProtocolError(f"unknown mode {self.mode!r}")
        extra = set(self.entries) - set(ENTRY_ORDER)
        if extra:
            raise ProtocolError(f"unknown directory entries {sorted(extra)}")
        for name in ENTRY_ORDER:
            self.entries.setdefault(name, None)
        has_mv = self.entries["mv"] is not None or self.entries["mv_hyper"] is not None
        if self.mode == MODE_BYPASS and has_mv:
            raise ProtocolError("bypass streams must not carry motion payloads")
        if self.mode == MODE_MC and (
            self.entries["mv"] is None or self.entries["mv_hyper"] is None
        ):
            raise ProtocolError("motion-compensated streams need mv and mv_hyper payloads")

    @property
    def pad_right(self) -> int:
        return expected_pads(self.width, self.height)[0]

    @property
    def pad_bottom(self) -> int:
        return expected_pads(self.width, self.height)[1]

    def payload_bytes(self) -> int:
        return sum(p.size_bytes for p in self.entries.values() if p is not None)

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack(
            ">BHHBBB",
            VERSION,
            self.width,
            self.height,
            self.pad_right,
            self.pad_bottom,
            _MODE_CODES[self.mode],
        )
        for name in ENTRY_ORDER:
            payload = self.entries[name]
            blob = b"" if payload is None else payload.to_bytes()
            out += struct.pack(">I", len(blob))
            out += blob
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Bitstream":
        if len(raw) < 12:
            raise ProtocolError(f"container truncated: {len(raw)} bytes, header needs 12")
        if raw[:4] != MAGIC:
            raise ProtocolError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
        version, width, height, pad_r, pad_b, mode_code = struct.unpack(
            ">BHHBBB", raw[4:12]
        )
        if version != VERSION:
            raise ProtocolError(f"unsupported container version {version}")
        if mode_code not in _MODE_NAMES:
            raise ProtocolError(f"unknown mode code {mode_code}")
        if width == 0 or height == 0 or width % 2 or height % 2:
            raise ProtocolError(f"invalid frame size {width}x{height}")
        want_r, want_b = expected_pads(width, height)
        if (pad_r, pad_b) != (want_r, want_b):
            raise ProtocolError(
                f"pad fields ({pad_r}, {pad_b}) do not match geometry ({want_r}, {want_b})"
            )
        pos = 12
        entries: Dict[str, Optional[Payload]] = {}
        for name in ENTRY_ORDER:
            if pos + 4 > len(raw):
                raise ProtocolError(f"container truncated in {name} entry length")
            (length,) = struct.unpack(">I", raw[pos : pos + 4])
            pos += 4
            if pos + length > len(raw):
                raise ProtocolError(
                    f"{name} entry claims {length} bytes but only {len(raw) - pos} remain"
                )
            entries[name] = None if length == 0 else Payload.from_bytes(raw[pos : pos + length])
            pos += length
        if pos != len(raw):
            raise ProtocolError(f"{len(raw) - pos} trailing bytes after directory")
        return cls(width=width, height=height, mode=_MODE_NAMES[mode_code], entries=entries)
