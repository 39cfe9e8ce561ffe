"""Training loop: AdamW with linear warmup + cosine decay, token-cache sampling,
checkpoints with bitwise resume."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffusion as dif
from . import tensor as tn
from .model import ModelConfig, Parameters, init_parameters, smdim_forward
from .remi import Vocabulary, read_cache, window
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SMCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    peak_lr: float = 5e-4
    warmup_steps: int = 100
    min_lr: float = 0.0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_path: str = ""
    data: tuple[str, ...] = ()
    schedule: str = "linear_mask"
    grid: int = 16

    def __post_init__(self):
        if not self.warmup_steps < self.steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} must be below steps={self.steps}")
        if not self.peak_lr > self.min_lr >= 0:
            raise ConfigError("need peak_lr > min_lr >= 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")


# -------------------------------------------------------------------------
# key = value config files
# -------------------------------------------------------------------------

_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    return raw


def parse_config(text: str, base_dir: Path | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Parse ``key = value`` lines (``#`` comments) into model and train configs.

    ``profile = full`` starts from the full-size model and schedule instead
    of the desk ones. Relative ``data`` paths resolve against ``base_dir``.
    """
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = (s.strip() for s in line.partition("="))
        if key != "profile" and key not in _MODEL_KEYS and key not in _TRAIN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = val
    profile = values.pop("profile", "desk")
    if profile not in ("desk", "full"):
        raise ConfigError(f"unknown profile {profile!r}")
    mdefaults = ModelConfig() if profile == "desk" else ModelConfig.full()
    tdefaults = TrainConfig() if profile == "desk" else TrainConfig(steps=200_000, batch_size=64,
                                                                      warmup_steps=10_000)
    mkw = {k: _coerce(k, v, getattr(mdefaults, k)) for k, v in values.items() if k in _MODEL_KEYS}
    tkw = {k: _coerce(k, v, getattr(tdefaults, k)) for k, v in values.items() if k in _TRAIN_KEYS}
    if base_dir is not None and "data" in tkw:
        tkw["data"] = tuple(str((base_dir / p).resolve()) if not Path(p).is_absolute() else p
                            for p in tkw["data"])
    try:
        return replace(mdefaults, **mkw), replace(tdefaults, **tkw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def format_config(mcfg: ModelConfig, tcfg: TrainConfig) -> str:
    lines = []
    for k, v in sorted({**asdict(mcfg), **asdict(tcfg)}.items()):
        if isinstance(v, tuple):
            v = ",".join(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


# -------------------------------------------------------------------------
# optimisation
# -------------------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine down to ``min_lr``."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = min(1.0, (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps))
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Parameters) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def _decays(name: str, arr: np.ndarray) -> bool:
    return arr.ndim >= 2 and not name.endswith("A_log")


def adamw_step(params: Parameters, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
               decay_filter=None) -> tuple[Parameters, OptimizerState]:
    """Bias-corrected Adam plus decoupled decay ``w <- w (1 - lr wd)``.

    Returns fresh parameter tensors and a fresh state; inputs are untouched.
    ``decay_filter(name, array)`` selects which arrays decay (default: all).
    """
    b1, b2 = betas
    step = state.step + 1
    new_p: Parameters = {}
    new_m, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        w = p.data
        if weight_decay and (decay_filter is None or decay_filter(name, w)):
            w = w * (1 - lr * weight_decay)
        new_p[name] = Tensor(w - lr * m_hat / (np.sqrt(v_hat) + eps), requires_grad=True)
        new_m[name], new_v[name] = m, v
    return new_p, OptimizerState(new_m, new_v, step)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def make_kernel(mcfg: ModelConfig, schedule: str = "linear_mask") -> dif.AbsorbingKernel:
    return dif.AbsorbingKernel(mcfg.vocab_size - 1, dif.make_schedule(mcfg.T, schedule))


def loss_and_grads(params: Parameters, mcfg: ModelConfig, kernel: dif.AbsorbingKernel,
                   x0: np.ndarray, x_t: np.ndarray, t: np.ndarray):
    with tn.Tape() as tape:
        logits = smdim_forward(x_t, t, params, mcfg)
        loss = dif.batch_elbo_loss(logits, x_t, x0, t, kernel)
    by_tensor = tn.backward(tape, loss)
    grads = {k: by_tensor.get(p, np.zeros_like(p.data)) for k, p in params.items()}
    return loss.item(), grads, logits.data


def train_step(batch: np.ndarray, params: Parameters, kernel: dif.AbsorbingKernel,
               opt: OptimizerState, rng: np.random.Generator, mcfg: ModelConfig,
               tcfg: TrainConfig):
    """One optimisation step; returns ``(params, opt, metrics)``."""
    x0 = np.asarray(batch, dtype=np.int64)
    if x0.ndim != 2 or x0.shape[0] == 0 or x0.shape[1] != mcfg.L_in:
        raise ValueError(f"batch must be (B>0, {mcfg.L_in}), got {x0.shape}")
    t = rng.integers(1, kernel.T + 1, size=x0.shape[0])
    x_t = dif.q_sample(x0, t, kernel, rng)
    loss, grads, logits = loss_and_grads(params, mcfg, kernel, x0, x_t, t)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at optimizer step {opt.step + 1}, t={t.tolist()}")
    grads, gnorm = clip_by_global_norm(grads, tcfg.grad_clip)
    lr = lr_at(opt.step + 1, tcfg)
    params, opt = adamw_step(params, grads, opt, lr, weight_decay=tcfg.weight_decay,
                             decay_filter=_decays)
    masked = x_t == kernel.mask_id
    correct = (logits.argmax(-1) == x0) & masked
    acc = float(correct.sum() / max(masked.sum(), 1))
    return params, opt, {"loss": loss, "acc": acc, "grad_norm": gnorm, "lr": lr}


def masked_accuracy(params: Parameters, mcfg: ModelConfig, kernel: dif.AbsorbingKernel,
                    windows: np.ndarray, t: int, rng: np.random.Generator,
                    repeats: int = 10) -> float:
    """Argmax x0-prediction accuracy over masked positions at step ``t``."""
    windows = np.asarray(windows, dtype=np.int64)
    hits = total = 0
    for _ in range(repeats):
        x_t = dif.q_sample(windows, t, kernel, rng)
        logits = smdim_forward(x_t, np.full(len(windows), t), params, mcfg).data
        masked = x_t == kernel.mask_id
        hits += int(((logits.argmax(-1) == windows) & masked).sum())
        total += int(masked.sum())
    return hits / max(total, 1)


# -------------------------------------------------------------------------
# datasets
# -------------------------------------------------------------------------

class WindowSampler:
    """Uniform draws (with replacement) over fixed-length windows."""

    def __init__(self, windows: np.ndarray, rng: np.random.Generator, vocab_hash: int | None = None):
        if len(windows) == 0:
            raise ValueError("dataset has no windows")
        self.windows = np.asarray(windows, dtype=np.int64)
        self.rng = rng
        self.vocab_hash = vocab_hash

    def __len__(self) -> int:
        return len(self.windows)

    def draw_indices(self, n: int) -> np.ndarray:
        return self.rng.integers(0, len(self.windows), size=n)

    def batch(self, n: int) -> np.ndarray:
        return self.windows[self.draw_indices(n)]


def load_dataset(paths, L_in: int, rng: np.random.Generator, vocab: Vocabulary | None = None
                 ) -> WindowSampler:
    vocab = vocab or Vocabulary()
    hashes = {}
    windows = []
    for path in paths:
        h, seqs = read_cache(path)
        hashes[str(path)] = h
        for s in seqs:
            windows += [w.ids for w in window(s, L_in, vocab)]
    distinct = sorted(set(hashes.values()))
    if len(distinct) > 1:
        desc = ", ".join(f"{p}: {h:#018x}" for p, h in hashes.items())
        raise ValueError(f"token caches use different vocabularies ({desc})")
    if distinct and distinct[0] != vocab.config_hash():
        raise ValueError(f"cache vocabulary hash {distinct[0]:#018x} does not match "
                         f"expected {vocab.config_hash():#018x}")
    if not windows:
        raise ValueError("token caches contain no usable windows")
    return WindowSampler(np.array(windows), rng, distinct[0] if distinct else None)


# -------------------------------------------------------------------------
# checkpoints
# -------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: Parameters
    opt: OptimizerState
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    rng_state: dict
    vocab_hash: int = 0
    history: list = field(default_factory=list)


def _write_block(buf: bytearray, payload: bytes) -> None:
    buf += struct.pack("<I", len(payload)) + payload


def save_checkpoint(path, params: Parameters, opt: OptimizerState, mcfg: ModelConfig,
                    tcfg: TrainConfig, step: int, rng_state: dict, vocab_hash: int = 0,
                    history=None) -> None:
    text = format_config(mcfg, tcfg)
    text += f"step = {step}\nopt_step = {opt.step}\nvocab_hash = {vocab_hash}\n"
    meta = json.dumps({"rng": rng_state, "history": history or []}, sort_keys=True)
    buf = bytearray(CKPT_MAGIC) + struct.pack("<I", CKPT_VERSION)
    _write_block(buf, text.encode("utf-8"))
    _write_block(buf, meta.encode("utf-8"))
    arrays = [(k, p.data) for k, p in params.items()]
    arrays += [(f"opt.m.{k}", a) for k, a in opt.m.items()]
    arrays += [(f"opt.v.{k}", a) for k, a in opt.v.items()]
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, vocab: Vocabulary | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    try:
        return _parse_checkpoint(buf, path, vocab)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc


def _parse_checkpoint(buf: bytes, path, vocab: Vocabulary | None) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 8

    def block():
        nonlocal pos
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = buf[pos:pos + n]
        pos += n
        return out.decode("utf-8")

    text = block()
    meta = json.loads(block())
    extras = {}
    cfg_lines = []
    for line in text.splitlines():
        key = line.partition("=")[0].strip()
        if key in ("step", "opt_step", "vocab_hash"):
            extras[key] = int(line.partition("=")[2])
        else:
            cfg_lines.append(line)
    mcfg, tcfg = parse_config("\n".join(cfg_lines))
    if vocab is not None and extras["vocab_hash"] and extras["vocab_hash"] != vocab.config_hash():
        raise CheckpointError(f"checkpoint vocabulary hash {extras['vocab_hash']:#018x} does not "
                              f"match supplied vocabulary {vocab.config_hash():#018x}")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated array {name!r}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    params = {k: Tensor(a, requires_grad=True) for k, a in arrays.items() if not k.startswith("opt.")}
    opt = OptimizerState({k: arrays[f"opt.m.{k}"] for k in params},
                         {k: arrays[f"opt.v.{k}"] for k in params}, extras["opt_step"])
    return Checkpoint(params, opt, mcfg, tcfg, extras["step"], meta["rng"],
                      extras["vocab_hash"], meta.get("history", []))


# -------------------------------------------------------------------------
# the loop
# -------------------------------------------------------------------------

@dataclass
class TrainState:
    params: Parameters
    opt: OptimizerState
    rng: np.random.Generator
    step: int = 0
    history: list = field(default_factory=list)


def init_state(mcfg: ModelConfig, tcfg: TrainConfig) -> TrainState:
    params = init_parameters(mcfg, tcfg.seed)
    return TrainState(params, OptimizerState.zeros_like(params),
                      np.random.default_rng(tcfg.seed + 1))


def state_from_checkpoint(ck: Checkpoint) -> TrainState:
    rng = np.random.default_rng()
    rng.bit_generator.state = ck.rng_state
    return TrainState(ck.params, ck.opt, rng, ck.step, list(ck.history))


def train(mcfg: ModelConfig, tcfg: TrainConfig, windows: np.ndarray,
          state: TrainState | None = None, until: int | None = None,
          vocab_hash: int = 0, log_every: int = 100) -> TrainState:
    """Run steps ``state.step + 1 .. until`` (default ``tcfg.steps``).

    The per-step loss is appended to ``state.history``. Batches and noise
    both come from ``state.rng``, which is what checkpoints persist.
    """
    state = state or init_state(mcfg, tcfg)
    kernel = make_kernel(mcfg, tcfg.schedule)
    sampler = WindowSampler(windows, state.rng)
    until = tcfg.steps if until is None else until
    while state.step < until:
        batch = sampler.batch(tcfg.batch_size)
        state.params, state.opt, metrics = train_step(batch, state.params, kernel, state.opt,
                                                      state.rng, mcfg, tcfg)
        state.step += 1
        state.history.append(metrics["loss"])
        if log_every and state.step % log_every == 0:
            log.info("step %d loss %.4f acc %.3f lr %.2e", state.step, metrics["loss"],
                     metrics["acc"], metrics["lr"])
        if tcfg.checkpoint_every and tcfg.checkpoint_path and state.step % tcfg.checkpoint_every == 0:
            save_checkpoint(tcfg.checkpoint_path, state.params, state.opt, mcfg, tcfg, state.step,
                            state.rng.bit_generator.state, vocab_hash, state.history)
    return state
