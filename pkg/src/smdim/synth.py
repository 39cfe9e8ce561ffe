"""Deterministic toy corpus: scales, arpeggios and two-voice patterns."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .midi import Note, Score, save_midi

MAJOR = (0, 2, 4, 5, 7, 9, 11)
MINOR = (0, 2, 3, 5, 7, 8, 10)
TEMPOS = (90, 100, 110, 120)
TPQ = 480
SIXTEENTH = TPQ // 4


def _scale_pitches(root: int, mode, count: int, start_degree: int = 0) -> list[int]:
    out = []
    for k in range(start_degree, start_degree + count):
        octave, degree = divmod(k, len(mode))
        out.append(root + 12 * octave + mode[degree])
    return out


def synth_piece(rng: np.random.Generator) -> Score:
    kind = ("scale", "arpeggio", "two_voice")[rng.integers(3)]
    root = int(rng.integers(55, 67))
    mode = MAJOR if rng.random() < 0.6 else MINOR
    bars = int(rng.integers(2, 5))
    step = int(rng.choice([2, 4]))          # eighths or quarters, in sixteenths
    vel = int(rng.integers(60, 100))
    notes: list[Note] = []
    per_bar = 16 // step
    n = bars * per_bar
    if kind == "scale":
        up = _scale_pitches(root, mode, per_bar + 1)
        line = (up + up[-2:0:-1]) * (n // (2 * per_bar) + 1)
        pitches = line[:n]
    elif kind == "arpeggio":
        chord = [0, 2, 4, 7]
        pitches = [_scale_pitches(root, mode, 1, chord[i % 4] + 7 * (i // 8 % 2))[0]
                   for i in range(n)]
    else:
        pitches = _scale_pitches(root, mode, n)
    for i, p in enumerate(pitches):
        notes.append(Note(i * step * SIXTEENTH, step * SIXTEENTH, int(p), vel))
    if kind == "two_voice":
        bass = root - 12
        for b in range(bars):
            notes.append(Note(b * 16 * SIXTEENTH, 8 * SIXTEENTH, bass, vel - 10))
            notes.append(Note((b * 16 + 8) * SIXTEENTH, 8 * SIXTEENTH, bass + mode[4], vel - 10))
    tempo = int(rng.choice(TEMPOS))
    return Score(notes=notes, ticks_per_quarter=TPQ, tempo_events=[(0, 60_000_000 // tempo)])


def synth_corpus(pieces: int, seed: int) -> list[Score]:
    rng = np.random.default_rng(seed)
    return [synth_piece(rng) for _ in range(pieces)]


def write_corpus(out_dir, pieces: int, seed: int) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, score in enumerate(synth_corpus(pieces, seed)):
        path = out / f"piece_{i:04d}.mid"
        save_midi(score, path)
        paths.append(path)
    return paths
