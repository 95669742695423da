"""AdamW with a cosine schedule, the training loop, and binary checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, from_dict, to_dict
from .data import BatchSpec, Corpus, SamplerSchedule, sample_batch, shuffle_for_cop
from .model import ModelConfig, VideoTextModel
from .objectives import OBJECTIVE_NAMES

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "lr", "vtc", "vtc_ctx", "cycle", "ftm", "cop", "total", "sigma")


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class Objectives:
    """Objective switches; ``ctx`` is the contextual contrastive term."""

    vtc: bool = True
    ctx: bool = True
    cycle: bool = True
    ftm: bool = True
    cop: bool = True

    def enabled(self) -> dict[str, bool]:
        return {"vtc": self.vtc, "vtc_ctx": self.ctx, "cycle": self.cycle,
                "ftm": self.ftm, "cop": self.cop}


@dataclass(frozen=True)
class ModelSettings:
    dim: int = 32
    heads: int = 2
    encoder_layers: int = 2
    context_layers: int = 4
    context_heads: int = 2
    max_relative_distance: int = 64
    mme_blocks: int = 2
    head_hidden: int = 32
    sigma_init: float = 0.07


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 1e-4
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0


@dataclass(frozen=True)
class SamplerSettings:
    initial_window: float = 900.0
    progressive: bool = True
    caption_source: str = "alternate"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    seed: int = 0
    batch: BatchSpec = field(default_factory=BatchSpec)
    model: ModelSettings = field(default_factory=ModelSettings)
    objectives: Objectives = field(default_factory=Objectives)
    optim: OptimSettings = field(default_factory=OptimSettings)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    context_encoders: bool = True
    symmetric_eq1: bool = False
    normalize: bool = True
    checkpoint_every: int = 1

    def __post_init__(self):
        if not any(to_dict(self.objectives).values()):
            raise ConfigError("at least one objective must be enabled")
        if self.epochs < 2:
            raise ConfigError("epochs must be at least 2 (the window schedule needs two endpoints)")
        if self.objectives.cop and self.batch.clips < 2:
            raise ConfigError("order prediction needs batch.clips >= 2")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be at least 1")

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return from_dict(cls, data)

    def model_config(self, corpus: Corpus) -> ModelConfig:
        m = self.model
        spec = corpus.spec
        return ModelConfig(feature_dim=spec.feature_dim, vocab_size=spec.vocab_size,
                           max_tokens=spec.caption_length, dim=m.dim, heads=m.heads,
                           encoder_layers=m.encoder_layers, context_layers=m.context_layers,
                           context_heads=m.context_heads,
                           max_relative_distance=m.max_relative_distance, mme_blocks=m.mme_blocks,
                           head_hidden=m.head_hidden, clips=self.batch.clips,
                           frames=self.batch.frames, sigma_init=m.sigma_init)


PROFILES: dict[str, dict] = {
    "reference": {},
    "smoke": {
        "epochs": 200,
        "checkpoint_every": 50,
        "batch": {"videos": 8, "clips": 4, "frames": 4},
        "model": {"dim": 16, "head_hidden": 32},
        "optim": {"lr": 3e-3},
    },
}


def profile_config(name: str, overrides: dict | None = None) -> TrainConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    data = to_dict(TrainConfig())
    _merge(data, PROFILES[name])
    if overrides:
        _merge(data, overrides)
    return TrainConfig.from_dict(data)


def _merge(base: dict, extra: dict) -> None:
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _merge(base[key], val)
        else:
            base[key] = val


# ---------------------------------------------------------------- optimisation

def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Adam moments with bias correction and decoupled (multiplicative) weight decay.

    ``decay`` names the parameters that receive weight decay; by default all do.
    """

    def __init__(self, params: dict[str, ad.DiffTensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay: set[str] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = set(params) if decay is None else set(decay)
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.steps = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        """Update every parameter named in ``grads``; others are left untouched."""
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if not np.all(np.isfinite(g)):
                raise ad.NumericError(f"non-finite gradient for parameter {name!r}")
        self.steps += 1
        bc1 = 1.0 - self.beta1 ** self.steps
        bc2 = 1.0 - self.beta2 ** self.steps
        for name, g in grads.items():
            p = self.params[name]
            if self.weight_decay and name in self.decay:
                p.values *= 1.0 - lr * self.weight_decay
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"steps": np.array([float(self.steps)])}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.steps = int(arrays["steps"][0])
        for k in self.params:
            self.m[k] = arrays[f"m.{k}"].copy()
            self.v[k] = arrays[f"v.{k}"].copy()


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] = grads[k] * factor
    return total


def decay_names(params: dict[str, ad.DiffTensor]) -> set[str]:
    """Weight matrices and embedding tables; biases, norms, tables of biases and sigma are exempt."""
    return {k for k, p in params.items()
            if p.ndim >= 2 and not k.endswith(("rel_bias.table", "pos_emb", "cls"))}


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CTXVLPCK"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    config: dict
    rng_state: dict
    epoch: int  # next epoch to run
    step: int   # next global step
    model_config: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    """Header, parameter arrays, optimizer arrays, then a JSON trailer; written atomically."""
    path = Path(path)
    trailer = json.dumps({"config": ckpt.config, "rng_state": ckpt.rng_state, "epoch": ckpt.epoch,
                          "step": ckpt.step, "model_config": ckpt.model_config},
                         sort_keys=True).encode("utf-8")
    blob = (MAGIC + struct.pack("<I", ckpt.version)
            + _pack_arrays(ckpt.params)
            + _pack_arrays(ckpt.optimizer)
            + struct.pack("<Q", len(trailer)) + trailer)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path: Path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    params = r.arrays()
    optimizer = r.arrays()
    n = struct.unpack("<Q", r.take(8))[0]
    try:
        trailer = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt trailer ({exc})") from None
    if r.pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    return Checkpoint(params, optimizer, trailer["config"], trailer["rng_state"], trailer["epoch"],
                      trailer["step"], trailer.get("model_config", {}), version)


def model_from_checkpoint(ckpt: Checkpoint) -> VideoTextModel:
    model = VideoTextModel(ModelConfig(**ckpt.model_config))
    params = model.parameters()
    if set(params) != set(ckpt.params):
        raise CheckpointError("checkpoint parameters do not match the model layout")
    for name, p in params.items():
        if p.values.shape != ckpt.params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.values = ckpt.params[name].copy()
    return model


# ---------------------------------------------------------------- training loop

class NonFiniteLossError(ad.NumericError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainResult:
    model: VideoTextModel
    checkpoint: Checkpoint
    log: list[dict]
    checkpoint_paths: list[Path]


def _fmt(val) -> str:
    return "" if val is None else repr(val)


def train(config: TrainConfig, corpus: Corpus, out_dir: Path | None = None, *,
          resume_from: Path | None = None, stop_after_epoch: int | None = None) -> TrainResult:
    """Run (or resume) training; one step is one batch, an epoch is ``ceil(videos / B)`` steps.

    With ``out_dir`` a checkpoint is written every ``checkpoint_every`` epochs
    (and after the last one) to ``checkpoints/epoch_XXX.ckpt``; every step is appended to
    ``logs/train_log.csv``.
    """
    model_cfg = config.model_config(corpus)
    model = VideoTextModel(model_cfg, seed=config.seed)
    params = model.parameters()
    opt = AdamW(params, config.optim.lr, (config.optim.beta1, config.optim.beta2), config.optim.eps,
                config.optim.weight_decay, decay_names(params))
    rng = np.random.default_rng([config.seed, 1])
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config != config.to_dict():
            raise ConfigError("resume config differs from the checkpoint's config")
        model = model_from_checkpoint(ckpt)
        params = model.parameters()
        opt.params = params
        opt.load_state_arrays(ckpt.optimizer)
        rng.bit_generator.state = ckpt.rng_state
        start_epoch = ckpt.epoch

    enabled = config.objectives.enabled()
    schedule = SamplerSchedule(config.epochs, corpus.t_max, config.sampler.initial_window,
                               config.sampler.progressive)
    steps_per_epoch = math.ceil(len(corpus.videos) / config.batch.videos)
    total_steps = config.epochs * steps_per_epoch
    last_epoch = config.epochs - 1 if stop_after_epoch is None else min(stop_after_epoch, config.epochs - 1)

    log_path = ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "logs" / "train_log.csv"
        if resume_from is None or not log_path.exists():
            log_path.write_text(",".join(LOG_COLUMNS) + "\n", encoding="utf-8")

    rows: list[dict] = []
    paths: list[Path] = []
    last_good = Path(resume_from) if resume_from is not None else None
    ckpt = None
    for epoch in range(start_epoch, last_epoch + 1):
        for s in range(steps_per_epoch):
            step = epoch * steps_per_epoch + s
            lr = cosine_lr(step, total_steps, config.optim.lr)
            batch = sample_batch(corpus, epoch, rng, config.batch, schedule,
                                 config.sampler.caption_source)
            shuffle = shuffle_for_cop(config.batch.videos, config.batch.clips, rng) if enabled["cop"] else None
            sigma = model.sigma
            with ad.Tape() as tape:
                bundle = model.losses(batch.frames, batch.tokens, batch.positions, enabled,
                                      shuffle=shuffle, use_context=config.context_encoders,
                                      normalize=config.normalize, symmetric=config.symmetric_eq1)
                total = bundle.total.item()
                if not math.isfinite(total):
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}", last_good)
                leaf_grads = tape.backward(bundle.total)
            by_id = {id(p): name for name, p in params.items()}
            grads = {by_id[id(p)]: g for p, g in leaf_grads.items()}
            if config.optim.grad_clip > 0:
                clip_grad_norm(grads, config.optim.grad_clip)
            opt.step(grads, lr)
            row = {"epoch": epoch, "step": step, "lr": lr, "total": total, "sigma": sigma}
            for name in OBJECTIVE_NAMES:
                row[name] = bundle.value(name)
            rows.append(row)
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8", newline="") as fh:
                    fh.write(",".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")
        log.info("epoch %d: mean total loss %.4f, sigma %.4f", epoch,
                 float(np.mean([r["total"] for r in rows if r["epoch"] == epoch])), model.sigma)
        ckpt = Checkpoint({k: p.values.copy() for k, p in params.items()},
                          {k: v.copy() for k, v in opt.state_arrays().items()},
                          config.to_dict(), rng.bit_generator.state, epoch + 1,
                          (epoch + 1) * steps_per_epoch, model_cfg.to_dict())
        if ckpt_dir is not None and ((epoch + 1) % config.checkpoint_every == 0 or epoch == last_epoch):
            path = ckpt_dir / f"epoch_{epoch:03d}.ckpt"
            save_checkpoint(ckpt, path)
            paths.append(path)
            last_good = path
    if ckpt is None:
        raise ValueError("nothing to train: resume checkpoint is already past the final epoch")
    return TrainResult(model, ckpt, rows, paths)


def read_log(path: Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
