"""Command-line entry point: ``python -m smdim <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, diffusion, evaluation, midi, remi, synth, train
from .model import denoiser

log = logging.getLogger("smdim")


def _cmd_synth(args) -> None:
    paths = synth.write_corpus(args.out, args.pieces, args.seed)
    print(f"wrote {len(paths)} MIDI files to {args.out}")


def _cmd_tokenize(args) -> None:
    vocab = remi.build_vocabulary(grid=args.grid)
    files = sorted(Path(args.inp).glob("*.mid"))
    if not files:
        raise FileNotFoundError(f"no .mid files in {args.inp}")
    seqs = [remi.encode(midi.load_midi(f), vocab, source=f.name) for f in files]
    remi.write_cache(args.out, seqs, vocab)
    print(f"tokenized {len(seqs)} files, {sum(map(len, seqs))} tokens -> {args.out}")


def _cmd_train(args) -> None:
    cfg_path = Path(args.config)
    mcfg, tcfg = train.load_config(cfg_path)
    if not tcfg.data:
        raise ValueError("config has no 'data' entry")
    ckpt_path = tcfg.checkpoint_path or str(cfg_path.with_suffix(".smck"))
    tcfg = replace(tcfg, checkpoint_path=ckpt_path)
    vocab = remi.build_vocabulary(grid=tcfg.grid)
    if args.resume:
        ck = train.load_checkpoint(args.resume, vocab)
        state = train.state_from_checkpoint(ck)
    else:
        state = None
    sampler = train.load_dataset(tcfg.data, mcfg.L_in, np.random.default_rng(0), vocab)
    state = train.train(mcfg, tcfg, sampler.windows, state, vocab_hash=vocab.config_hash())
    train.save_checkpoint(ckpt_path, state.params, state.opt, mcfg, tcfg, state.step,
                          state.rng.bit_generator.state, vocab.config_hash(), state.history)
    kernel = train.make_kernel(mcfg, tcfg.schedule)
    acc = train.masked_accuracy(state.params, mcfg, kernel, sampler.windows, 1,
                                np.random.default_rng(tcfg.seed + 2))
    h = state.history
    print(f"step {state.step}: loss {np.mean(h[-50:]):.4f} (first 50 steps {np.mean(h[:50]):.4f}), "
          f"masked accuracy at t=1 {acc:.3f}; checkpoint {ckpt_path}")


def generate(ckpt_path, num: int, length: int, seed: int, out_dir, stride: int = 1) -> list[Path]:
    ck = train.load_checkpoint(ckpt_path)
    mcfg = replace(ck.model_config, L_in=length)
    vocab = remi.build_vocabulary(grid=ck.train_config.grid)
    kernel = train.make_kernel(mcfg, ck.train_config.schedule)
    rng = np.random.default_rng(seed)
    seqs = diffusion.sample(denoiser(ck.params, mcfg), length, kernel, rng, stride=stride,
                            batch=num)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, ids in enumerate(seqs):
        score = remi.decode(ids.tolist(), vocab)
        path = out / f"sample_{i:04d}.mid"
        midi.save_midi(score, path)
        paths.append(path)
    return paths


def _cmd_generate(args) -> None:
    paths = generate(args.ckpt, args.num, args.len, args.seed, args.out, args.stride)
    print(f"wrote {len(paths)} samples to {args.out}")


def _load_dir(path, workers: int) -> list[midi.Score]:
    files = sorted(Path(path).glob("*.mid"))
    if not files:
        raise FileNotFoundError(f"no .mid files in {path}")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(midi.load_midi, files))


def _cmd_eval(args) -> None:
    gen = _load_dir(args.gen, args.workers)
    ref = _load_dir(args.ref, args.workers)
    report = evaluation.evaluate_oa(gen, ref, bootstrap=args.bootstrap, seed=args.seed)
    Path(args.out).write_text(report.to_csv())
    print(report.to_text(), end="")


def _cmd_bench(args) -> None:
    mcfg, _ = train.load_config(args.config)
    if args.order:
        mcfg = replace(mcfg, block_order=args.order)
    lengths = [int(x) for x in args.lengths.split(",") if x]
    mcfg = replace(mcfg, L_in=lengths[0])
    rows = bench.bench_scaling(lengths, mcfg, repeats=args.repeats, seed=args.seed)
    bench.write_csv(rows, args.out, workers=args.workers)
    for r in rows:
        print(f"L={r['L']:>6}  analytic={r['total_analytic']:>14,}  measured={r['measured_macs']:>14,}"
              f"  attn_frac={r['attn_fraction']:.3f}  {r['median_wall_ms']:.1f} ms")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smdim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a deterministic toy MIDI corpus")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--pieces", type=int, default=8, help="number of pieces (default 8)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("tokenize", help="encode a MIDI directory into a token cache")
    s.add_argument("--in", dest="inp", required=True, help="directory of .mid files")
    s.add_argument("--out", required=True, help="token cache file to write")
    s.add_argument("--grid", type=int, default=16, help="positions per bar (default 16)")
    s.set_defaults(func=_cmd_tokenize)

    s = sub.add_parser("train", help="train the denoiser from a key = value config")
    s.add_argument("--config", required=True, help="config file")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("generate", help="sample MIDI files from a checkpoint")
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--num", type=int, required=True, help="number of samples")
    s.add_argument("--len", type=int, required=True, help="token length per sample")
    s.add_argument("--seed", type=int, required=True, help="random seed")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--stride", type=int, default=1, help="visit every k-th diffusion step")
    s.set_defaults(func=_cmd_generate)

    s = sub.add_parser("eval", help="overlap-area report of generated vs reference MIDI")
    s.add_argument("--gen", required=True, help="directory of generated .mid files")
    s.add_argument("--ref", required=True, help="directory of reference .mid files")
    s.add_argument("--out", required=True, help="CSV report path")
    s.add_argument("--bootstrap", type=int, default=20, help="bootstrap resamples (default 20)")
    s.add_argument("--seed", type=int, default=0, help="bootstrap seed (default 0)")
    s.add_argument("--workers", type=int, default=1, help="threads for MIDI loading (default 1)")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("bench", help="MAC and wall-time scaling over sequence lengths")
    s.add_argument("--config", required=True, help="config file (model section is used)")
    s.add_argument("--lengths", required=True, help="comma-separated ascending lengths")
    s.add_argument("--out", required=True, help="CSV output path")
    s.add_argument("--order", choices=("MFA", "AFM", "mamba_only", "attention_only"),
                   help="override the block order")
    s.add_argument("--repeats", type=int, default=5, help="timed repeats per length (default 5)")
    s.add_argument("--seed", type=int, default=0, help="parameter seed (default 0)")
    s.add_argument("--workers", type=int, default=1,
                   help="recorded in the CSV header; runs are single-worker")
    s.set_defaults(func=_cmd_bench)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 -- one-line cause, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
