"""
From MIDI to samples on a toy corpus
====================================

Synthesize a few pieces, tokenize them, train a small denoiser for a few
hundred steps, sample new sequences and score them against the corpus.
Takes about half a minute on one core.
"""

import tempfile
from pathlib import Path

import numpy as np

from smdim import cli, evaluation, midi, remi, synth, train

work = Path(tempfile.mkdtemp(prefix="smdim_demo_"))
print("working in", work)

paths = synth.write_corpus(work / "midi", 8, seed=0)
score = midi.load_midi(paths[0])
print(f"{len(paths)} pieces; the first has {len(score.notes)} notes")

vocab = remi.build_vocabulary()
seq = remi.encode(score, vocab)
print("first tokens:", [vocab.token(i) for i in seq.ids[:10]])
remi.write_cache(work / "tok.smdm", [remi.encode(midi.load_midi(p), vocab) for p in paths], vocab)

(work / "toy.cfg").write_text("data = tok.smdm\nsteps = 400\nwarmup_steps = 40\n"
                              "peak_lr = 0.002\nseed = 0\n")
cli.run(["train", "--config", str(work / "toy.cfg")])
ck = train.load_checkpoint(work / "toy.smck", vocab)
h = np.asarray(ck.history)
print("loss every 50 steps:", np.round(h[::50], 3))

out = cli.generate(work / "toy.smck", num=8, length=64, seed=1, out_dir=work / "gen")
gen = [midi.load_midi(p) for p in out]
print("notes per sample:", [len(s.notes) for s in gen])

# OA needs nonempty pieces; short windows can decode to nothing
gen = [s for s in gen if s.notes]
if len(gen) >= 4:
    ref = synth.synth_corpus(16, 1)
    print(evaluation.evaluate_oa(gen, ref, bootstrap=5).to_text())
