"""Standard MIDI File (format 0/1) reading and writing.

Only note, tempo and time-signature information survives the round trip;
everything else (controllers, program changes, SysEx, text meta events) is
parsed for framing and then discarded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

DEFAULT_TEMPO = 500000  # microseconds per quarter, i.e. 120 BPM


class MidiError(ValueError):
    pass


class Note(NamedTuple):
    onset: int
    duration: int
    pitch: int
    velocity: int


@dataclass
class Score:
    notes: list[Note] = field(default_factory=list)
    ticks_per_quarter: int = 480
    tempo_events: list[tuple[int, int]] = field(default_factory=list)
    time_signature: tuple[int, int] = (4, 4)
    # notes dropped while parsing (unterminated or zero length)
    warnings: int = field(default=0, compare=False)

    def __post_init__(self):
        self.notes = sorted((Note(*n) for n in self.notes), key=lambda n: (n.onset, n.pitch))

    @property
    def bar_ticks(self) -> int:
        num, den = self.time_signature
        return self.ticks_per_quarter * 4 * num // den

    def validate(self) -> None:
        if self.ticks_per_quarter <= 0:
            raise MidiError("ticks_per_quarter must be positive")
        for n in self.notes:
            if n.onset < 0 or n.duration <= 0:
                raise MidiError(f"bad note timing {n}")
            if not (0 <= n.pitch <= 127 and 1 <= n.velocity <= 127):
                raise MidiError(f"note out of range {n}")


def read_vlq(buf: bytes, offset: int) -> tuple[int, int]:
    """Decode a variable-length quantity; return ``(value, next_offset)``."""
    value = 0
    for i in range(4):
        if offset + i >= len(buf):
            raise MidiError("truncated variable-length quantity")
        b = buf[offset + i]
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, offset + i + 1
    raise MidiError("variable-length quantity longer than 4 bytes")


def write_vlq(value: int) -> bytes:
    if not 0 <= value <= 0x0FFFFFFF:
        raise MidiError(f"value {value} does not fit a 4-byte VLQ")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _chunks(buf: bytes):
    pos = 0
    while pos + 8 <= len(buf):
        kind = buf[pos:pos + 4]
        (length,) = struct.unpack(">I", buf[pos + 4:pos + 8])
        start = pos + 8
        if start + length > len(buf):
            raise MidiError(f"chunk {kind!r} length {length} overruns buffer")
        yield kind, buf[start:start + length]
        pos = start + length


def _track_events(data: bytes):
    """Yield ``(abs_tick, kind, payload)`` for one MTrk chunk."""
    pos = 0
    tick = 0
    status = None
    while pos < len(data):
        delta, pos = read_vlq(data, pos)
        tick += delta
        if pos >= len(data):
            raise MidiError("truncated event")
        b = data[pos]
        if b == 0xFF:
            if pos + 1 >= len(data):
                raise MidiError("truncated meta event")
            mtype = data[pos + 1]
            length, pos = read_vlq(data, pos + 2)
            payload = data[pos:pos + length]
            if len(payload) < length:
                raise MidiError("truncated meta event payload")
            pos += length
            yield tick, ("meta", mtype), payload
            if mtype == 0x2F:
                return
            continue
        if b in (0xF0, 0xF7):
            length, pos = read_vlq(data, pos + 1)
            pos += length
            continue
        if b & 0x80:
            status = b
            pos += 1
        elif status is None:
            raise MidiError("running status without a previous status byte")
        n_data = 1 if status & 0xF0 in (0xC0, 0xD0) else 2
        payload = data[pos:pos + n_data]
        if len(payload) < n_data:
            raise MidiError("truncated channel message")
        pos += n_data
        yield tick, ("channel", status), payload


def parse_midi(buf: bytes) -> Score:
    """Parse an SMF buffer into a :class:`Score`, merging all tracks."""
    buf = bytes(buf)
    if buf[:4] != b"MThd":
        raise MidiError("missing MThd header")
    chunks = list(_chunks(buf))
    header = chunks[0][1]
    if len(header) < 6:
        raise MidiError("short MThd chunk")
    fmt, ntrks, division = struct.unpack(">HHH", header[:6])
    if fmt == 2:
        raise MidiError("SMF format 2 is not supported")
    if fmt not in (0, 1):
        raise MidiError(f"unknown SMF format {fmt}")
    if division & 0x8000:
        raise MidiError("SMPTE time division is not supported")

    events = []
    for track_idx, (kind, data) in enumerate(c for c in chunks[1:] if c[0] == b"MTrk"):
        for seq, (tick, what, payload) in enumerate(_track_events(data)):
            events.append((tick, track_idx, seq, what, payload))
    events.sort(key=lambda e: e[:3])

    tempo_events: list[tuple[int, int]] = []
    time_sig = None
    active: dict[int, tuple[int, int]] = {}
    notes: list[Note] = []
    dropped = 0

    def close(pitch: int, tick: int) -> None:
        nonlocal dropped
        onset, vel = active.pop(pitch)
        if tick > onset:
            notes.append(Note(onset, tick - onset, pitch, vel))
        else:
            dropped += 1

    for tick, _, _, (kind, code), payload in events:
        if kind == "meta":
            if code == 0x51 and len(payload) == 3:
                tempo_events.append((tick, int.from_bytes(payload, "big")))
            elif code == 0x58 and len(payload) >= 2 and time_sig is None:
                time_sig = (payload[0], 2 ** payload[1])
            continue
        hi = code & 0xF0
        if hi == 0x90 and payload[1] > 0:
            pitch = payload[0]
            if pitch in active:
                close(pitch, tick)
            active[pitch] = (tick, payload[1])
        elif hi == 0x80 or (hi == 0x90 and payload[1] == 0):
            if payload[0] in active:
                close(payload[0], tick)
    dropped += len(active)

    return Score(notes=notes, ticks_per_quarter=division, tempo_events=tempo_events,
                 time_signature=time_sig or (4, 4), warnings=dropped)


def write_midi(score: Score) -> bytes:
    """Serialise ``score`` as a single-track format-0 file."""
    score.validate()
    den_pow = score.time_signature[1].bit_length() - 1
    # (tick, order, bytes); at equal ticks: meta first, then note-offs, then note-ons
    events: list[tuple[int, int, bytes]] = []
    if score.time_signature != (4, 4):
        events.append((0, 0, b"\xff\x58\x04" + bytes([score.time_signature[0], den_pow, 24, 8])))
    for tick, tempo in score.tempo_events:
        events.append((tick, 0, b"\xff\x51\x03" + tempo.to_bytes(3, "big")))
    for n in score.notes:
        events.append((n.onset, 2, bytes([0x90, n.pitch, n.velocity])))
        events.append((n.onset + n.duration, 1, bytes([0x80, n.pitch, 0])))
    events.sort(key=lambda e: (e[0], e[1]))

    track = bytearray()
    now = 0
    for tick, _, msg in events:
        track += write_vlq(tick - now) + msg
        now = tick
    track += b"\x00\xff\x2f\x00"
    header = struct.pack(">4sIHHH", b"MThd", 6, 0, 1, score.ticks_per_quarter)
    return header + struct.pack(">4sI", b"MTrk", len(track)) + bytes(track)


def load_midi(path) -> Score:
    with open(path, "rb") as fh:
        return parse_midi(fh.read())


def save_midi(score: Score, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_midi(score))
