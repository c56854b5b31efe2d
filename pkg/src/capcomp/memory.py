"""Byte-addressable memory with per-granule validity tags.

Memory is split into 16-byte granules, each carrying one tag bit.  A stored
capability occupies two granules (its flat record zero-padded to 32 bytes);
the tag lives on the first granule and the second stays untagged.  Any plain
byte write clears the tags of every granule it overlaps, which is what makes
capabilities unforgeable: bytes alone can never conjure a set tag.
"""

from __future__ import annotations

from .capability import RECORD_LEN, Capability, deserialize, serialize

GRANULE = 16
CAP_SLOT = 2 * GRANULE          # in-memory footprint of one capability
DEFAULT_SIZE = 1 << 24


class AddressError(Exception):
    """Raised when an access falls outside the memory array."""


class AlignmentError(Exception):
    """Raised when a capability load/store is not granule-aligned."""


class TaggedMemory:
    """A flat byte array plus one tag bit per 16-byte granule."""

    __slots__ = ("size", "data", "tags")

    def __init__(self, size: int = DEFAULT_SIZE):
        if size <= 0 or size % GRANULE != 0:
            raise ValueError(f"memory size must be a positive multiple of {GRANULE}")
        self.size = size
        self.data = bytearray(size)
        self.tags = bytearray(size // GRANULE)   # 0/1 per granule

    def _check_range(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > self.size:
            raise AddressError(f"access [{addr:#x}, {addr + length:#x}) outside memory of {self.size:#x}")

    def read_bytes(self, addr: int, length: int) -> bytes:
        self._check_range(addr, length)
        return bytes(self.data[addr:addr + length])

    def write_bytes(self, addr: int, payload: bytes) -> None:
        """Write raw bytes, clearing the tag of every overlapped granule.

        A zero-length write is a no-op and clears nothing.
        """
        length = len(payload)
        self._check_range(addr, length)
        if length == 0:
            return
        self.data[addr:addr + length] = payload
        first = addr // GRANULE
        last = (addr + length - 1) // GRANULE
        for g in range(first, last + 1):
            self.tags[g] = 0

    def store_cap(self, addr: int, c: Capability) -> None:
        """Store a capability at a naturally aligned 32-byte slot.

        Both granules of the slot carry the capability's tag.  The record
        spans two granules, so a single-tag scheme would let a byte write
        into the second granule corrupt the upper bound, cursor, permission
        and seal fields while the slot stayed valid.  Natural alignment also
        keeps slots from interleaving at half-slot offsets, which would let
        one legitimate store re-tag the tail of a neighbouring record.
        """
        if addr % CAP_SLOT != 0:
            raise AlignmentError(f"capability store at {addr:#x} not {CAP_SLOT}-aligned")
        self._check_range(addr, CAP_SLOT)
        record = serialize(c)
        self.data[addr:addr + RECORD_LEN] = record
        self.data[addr + RECORD_LEN:addr + CAP_SLOT] = bytes(CAP_SLOT - RECORD_LEN)
        t = 1 if c.tag else 0
        self.tags[addr // GRANULE] = t
        self.tags[addr // GRANULE + 1] = t

    def load_cap(self, addr: int) -> Capability:
        """Load a capability from a naturally aligned 32-byte slot.

        Never traps on content: raw bytes decode to an untagged capability.
        The result is valid only when both granule tags survived, so a byte
        write anywhere in the slot kills it and forged records stay dead.
        """
        if addr % CAP_SLOT != 0:
            raise AlignmentError(f"capability load at {addr:#x} not {CAP_SLOT}-aligned")
        self._check_range(addr, CAP_SLOT)
        c = deserialize(bytes(self.data[addr:addr + RECORD_LEN]))
        tag = self.tags[addr // GRANULE] != 0 and self.tags[addr // GRANULE + 1] != 0
        if c.tag != tag:
            c = Capability(c.base, c.top, c.address, c.perms, c.otype, tag)
        return c

    def granule_tag(self, addr: int) -> bool:
        self._check_range(addr, 1)
        return self.tags[addr // GRANULE] != 0

    def dump_hex(self, addr: int, length: int) -> str:
        """Render one line per granule: address, 16 hex bytes, tag marker."""
        self._check_range(addr, length)
        start = (addr // GRANULE) * GRANULE
        end = addr + length
        lines = []
        g = start
        while g < end:
            row = self.data[g:g + GRANULE]
            hexpart = " ".join(f"{b:02x}" for b in row)
            t = "T" if self.tags[g // GRANULE] else "-"
            lines.append(f"{g:08x}: {hexpart}  {t}")
            g += GRANULE
        return "\n".join(lines)
