"""REMI event tokens: Bar / Position / Tempo / Pitch / Velocity / Duration.

Id layout, in order::

    [Bar][Position_1..Q][Tempo bins][Pitch 0..127][Velocity bins][Duration bins][PAD][MASK]

so MASK is always the largest id (the absorbing diffusion state) and PAD the
one below it.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .midi import Note, Score

CACHE_MAGIC = b"SMDM"
CACHE_VERSION = 1


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    grid: int = 16
    velocity_bins: int = 32
    duration_bins: int = 64
    tempo_bins: int = 32
    tempo_min: float = 30.0
    tempo_max: float = 300.0
    decode_ticks_per_quarter: int = 480

    def __post_init__(self):
        for name in ("grid", "velocity_bins", "duration_bins", "tempo_bins"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    # offsets of each token family
    @property
    def bar(self) -> int:
        return 0

    @property
    def position_offset(self) -> int:
        return 1

    @property
    def tempo_offset(self) -> int:
        return self.position_offset + self.grid

    @property
    def pitch_offset(self) -> int:
        return self.tempo_offset + self.tempo_bins

    @property
    def velocity_offset(self) -> int:
        return self.pitch_offset + 128

    @property
    def duration_offset(self) -> int:
        return self.velocity_offset + self.velocity_bins

    @property
    def pad(self) -> int:
        return self.duration_offset + self.duration_bins

    @property
    def mask(self) -> int:
        return self.pad + 1

    @property
    def size(self) -> int:
        return self.mask + 1

    def __len__(self) -> int:
        return self.size

    @property
    def velocity_width(self) -> float:
        return 128 / self.velocity_bins

    def token(self, idx: int) -> str:
        """Human-readable name of token ``idx``."""
        if not 0 <= idx < self.size:
            raise IndexError(f"token id {idx} outside vocabulary of size {self.size}")
        if idx == self.bar:
            return "Bar"
        if idx < self.tempo_offset:
            return f"Position_{idx - self.position_offset + 1}"
        if idx < self.pitch_offset:
            return f"Tempo_{idx - self.tempo_offset}"
        if idx < self.velocity_offset:
            return f"Pitch_{idx - self.pitch_offset}"
        if idx < self.duration_offset:
            return f"Velocity_{idx - self.velocity_offset}"
        if idx < self.pad:
            return f"Duration_{idx - self.duration_offset + 1}"
        return "PAD" if idx == self.pad else "MASK"

    def id(self, name: str) -> int:
        if name in ("Bar", "PAD", "MASK"):
            return {"Bar": self.bar, "PAD": self.pad, "MASK": self.mask}[name]
        family, _, num = name.partition("_")
        n = int(num)
        base, lo, hi = {
            "Position": (self.position_offset - 1, 1, self.grid),
            "Tempo": (self.tempo_offset, 0, self.tempo_bins - 1),
            "Pitch": (self.pitch_offset, 0, 127),
            "Velocity": (self.velocity_offset, 0, self.velocity_bins - 1),
            "Duration": (self.duration_offset - 1, 1, self.duration_bins),
        }[family]
        if not lo <= n <= hi:
            raise KeyError(name)
        return base + n

    # binning
    def velocity_bin(self, velocity: int) -> int:
        return min(int(velocity / self.velocity_width), self.velocity_bins - 1)

    def velocity_value(self, b: int) -> int:
        return int(min(127, max(1, round((b + 0.5) * self.velocity_width))))

    def tempo_grid(self) -> np.ndarray:
        return np.geomspace(self.tempo_min, self.tempo_max, self.tempo_bins)

    def tempo_bin(self, bpm: float) -> int:
        logs = np.log(self.tempo_grid())
        return int(np.argmin(np.abs(logs - math.log(max(bpm, 1e-9)))))

    def config_hash(self) -> int:
        text = (f"grid={self.grid};vel={self.velocity_bins};dur={self.duration_bins};"
                f"tempo={self.tempo_bins}:{self.tempo_min}:{self.tempo_max};"
                f"tpq={self.decode_ticks_per_quarter}")
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def build_vocabulary(grid: int = 16, velocity_bins: int = 32, duration_bins: int = 64,
                     tempo_bins: int = 32) -> Vocabulary:
    return Vocabulary(grid=grid, velocity_bins=velocity_bins,
                      duration_bins=duration_bins, tempo_bins=tempo_bins)


@dataclass
class TokenSequence:
    ids: list[int]
    source: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


def encode(score: Score, vocab: Vocabulary, source: str = "") -> TokenSequence:
    """Quantise ``score`` onto the bar grid and emit REMI tokens."""
    bar_ticks = score.bar_ticks
    slot = bar_ticks / vocab.grid
    # (bar, position) -> list of events; tempo sorts ahead of notes
    events: dict[tuple[int, int], list] = {}

    def place(tick: int) -> tuple[int, int]:
        q = int(math.floor(tick / slot + 0.5))
        return divmod(q, vocab.grid)

    for tick, uspq in score.tempo_events:
        events.setdefault(place(tick), []).append((0, vocab.tempo_bin(60e6 / uspq)))
    for n in score.notes:
        dur = min(max(int(math.floor(n.duration / slot + 0.5)), 1), vocab.duration_bins)
        events.setdefault(place(n.onset), []).append((1, n.pitch, vocab.velocity_bin(n.velocity), dur))

    if not events:
        return TokenSequence([], source)
    last_bar = max(b for b, _ in events)
    ids: list[int] = []
    for bar in range(last_bar + 1):
        ids.append(vocab.bar)
        for pos in range(vocab.grid):
            evs = events.get((bar, pos))
            if not evs:
                continue
            ids.append(vocab.position_offset + pos)
            for ev in sorted(evs):
                if ev[0] == 0:
                    ids.append(vocab.tempo_offset + ev[1])
                else:
                    _, pitch, vbin, dur = ev
                    ids += [vocab.pitch_offset + pitch, vocab.velocity_offset + vbin,
                            vocab.duration_offset + dur - 1]
    return TokenSequence(ids, source)


@dataclass
class DecodeStats:
    skipped: int = 0


def decode(tokens, vocab: Vocabulary, stats: DecodeStats | None = None) -> Score:
    """Total inverse of :func:`encode`; malformed input is skipped and tallied."""
    ids = list(tokens.ids if isinstance(tokens, TokenSequence) else tokens)
    tpq = vocab.decode_ticks_per_quarter
    bar_ticks = tpq * 4
    slot = bar_ticks // vocab.grid
    stats = stats if stats is not None else DecodeStats()
    notes: list[Note] = []
    tempos: list[tuple[int, int]] = []
    bar, pos = -1, 0
    i = 0
    while i < len(ids):
        tok = int(ids[i])
        if tok == vocab.bar:
            bar += 1
            pos = 0
        elif vocab.position_offset <= tok < vocab.tempo_offset:
            pos = tok - vocab.position_offset
        elif vocab.tempo_offset <= tok < vocab.pitch_offset:
            bpm = vocab.tempo_grid()[tok - vocab.tempo_offset]
            tick = max(bar, 0) * bar_ticks + pos * slot
            tempos.append((tick, int(round(60e6 / bpm))))
        elif vocab.pitch_offset <= tok < vocab.velocity_offset:
            if (i + 2 < len(ids)
                    and vocab.velocity_offset <= ids[i + 1] < vocab.duration_offset
                    and vocab.duration_offset <= ids[i + 2] < vocab.pad):
                onset = max(bar, 0) * bar_ticks + pos * slot
                dur = (int(ids[i + 2]) - vocab.duration_offset + 1) * slot
                vel = vocab.velocity_value(int(ids[i + 1]) - vocab.velocity_offset)
                notes.append(Note(onset, dur, tok - vocab.pitch_offset, vel))
                i += 3
                continue
            stats.skipped += 1
        elif tok == vocab.pad:
            pass
        else:
            # orphan velocity/duration, MASK, or out-of-range ids
            stats.skipped += 1
        i += 1
    # one note per (onset, pitch): later duplicates are dropped
    seen = set()
    unique = []
    for n in notes:
        if (n.onset, n.pitch) in seen:
            stats.skipped += 1
            continue
        seen.add((n.onset, n.pitch))
        unique.append(n)
    score = Score(notes=unique, ticks_per_quarter=tpq, tempo_events=tempos)
    score.warnings = stats.skipped
    return score


def window(tokens, L: int, vocab: Vocabulary) -> list[TokenSequence]:
    """Cut ``tokens`` into length-``L`` windows, preferring Bar boundaries.

    Bars are packed greedily; a bar that does not fit starts a new window
    unless the current one holds fewer than ``L/4`` tokens, in which case the
    bar is split. The last window is padded with PAD, and dropped if it holds
    fewer than ``L/4`` real tokens.
    """
    if L <= 0:
        raise ValueError("window length must be positive")
    seq = tokens if isinstance(tokens, TokenSequence) else TokenSequence(list(tokens))
    ids = seq.ids
    starts = [i for i, t in enumerate(ids) if t == vocab.bar]
    if not starts or starts[0] != 0:
        starts = [0] + starts
    bars = [ids[a:b] for a, b in zip(starts, starts[1:] + [len(ids)])]
    bars = [b for b in bars if b]
    min_real = L / 4
    out: list[list[int]] = []
    cur: list[int] = []
    for bar in bars:
        while bar:
            room = L - len(cur)
            if len(bar) <= room:
                cur += bar
                bar = []
            elif len(cur) < min_real:
                cur += bar[:room]
                bar = bar[room:]
            if len(cur) == L or bar:
                out.append(cur)
                cur = []
    if cur:
        out.append(cur)
    result = []
    for k, w in enumerate(out):
        if len(w) < min_real:
            continue
        result.append(TokenSequence(w + [vocab.pad] * (L - len(w)), f"{seq.source}#{k}"))
    return result


# -------------------------------------------------------------------------
# token cache files
# -------------------------------------------------------------------------

def write_cache(path, sequences, vocab: Vocabulary) -> None:
    """Little-endian: magic, u32 version, u64 vocab hash, u64 count, then
    per sequence a u32 length followed by u16 ids."""
    buf = bytearray(CACHE_MAGIC)
    buf += struct.pack("<IQQ", CACHE_VERSION, vocab.config_hash(), len(sequences))
    for s in sequences:
        ids = s.ids if isinstance(s, TokenSequence) else list(s)
        buf += struct.pack("<I", len(ids))
        buf += np.asarray(ids, dtype="<u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def read_cache(path) -> tuple[int, list[TokenSequence]]:
    """Return ``(vocab_hash, sequences)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CACHE_MAGIC:
        raise CacheError(f"{path}: not a token cache (bad magic)")
    version, vhash, count = struct.unpack_from("<IQQ", buf, 4)
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    pos = 4 + struct.calcsize("<IQQ")
    seqs = []
    for k in range(count):
        if pos + 4 > len(buf):
            raise CacheError(f"{path}: truncated cache")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + 2 * n > len(buf):
            raise CacheError(f"{path}: truncated cache")
        ids = np.frombuffer(buf, dtype="<u2", count=n, offset=pos).astype(int).tolist()
        pos += 2 * n
        seqs.append(TokenSequence(ids, f"{path}:{k}"))
    return vhash, seqs
