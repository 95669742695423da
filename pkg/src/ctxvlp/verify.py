"""Finite-difference checks of every training objective on small random inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .data import build_ftm_labels
from .nn import MlpHead

DEFAULT_TOL = 1e-5


@dataclass(frozen=True)
class CheckShape:
    videos: int = 2
    clips: int = 3
    frames: int = 2
    dim: int = 8


@dataclass
class LossProblem:
    """A loss closure together with every tensor it should be differentiated against."""

    name: str
    fn: object
    params: list


def _leaf(rng, shape, name):
    return ad.DiffTensor(rng.standard_normal(shape), trainable=True, name=name)


def _head_params(head) -> list:
    return list(head.parameters().values())


def build_problem(name: str, seed: int, shape: CheckShape = CheckShape()) -> LossProblem:
    rng = np.random.default_rng(seed)
    b, c, f, d = shape.videos, shape.clips, shape.frames, shape.dim
    # sigma near 0.5 keeps logits moderate so no probability hits the clamp
    log_sigma = ad.DiffTensor(np.log(rng.uniform(0.3, 0.8)), trainable=True, name="log_sigma")
    if name in ("vtc", "vtc_ctx", "cycle"):
        frames = _leaf(rng, (b, c, f, d), "frames")
        texts = _leaf(rng, (b, c, d), "texts")
        loss = {"vtc": obj.vtc_loss, "vtc_ctx": obj.vtc_ctx_loss, "cycle": obj.cycle_loss}[name]
        return LossProblem(name, lambda: loss(frames, texts, log_sigma), [frames, texts, log_sigma])
    if name == "ftm":
        fused = _leaf(rng, (b * c, c * f, d), "fused")
        head = MlpHead(d, d, 1, rng)
        for p in _head_params(head):
            p.values[...] = rng.standard_normal(p.shape) * 0.5
        labels = np.tile(build_ftm_labels(c, f), (b, 1))
        return LossProblem(name, lambda: obj.ftm_loss(fused, labels, head), [fused] + _head_params(head))
    if name == "cop":
        clip_reps = _leaf(rng, (b, c, f * d), "clip_reps")
        text_reps = _leaf(rng, (b, c, d), "text_reps")
        clip_head = MlpHead(f * d, d, c, rng)
        text_head = MlpHead(d, d, c, rng)
        for p in _head_params(clip_head) + _head_params(text_head):
            p.values[...] = rng.standard_normal(p.shape) * 0.5
        clip_perm = np.stack([rng.permutation(c) for _ in range(b)])
        text_perm = np.stack([rng.permutation(c) for _ in range(b)])
        return LossProblem(
            name,
            lambda: obj.cop_loss(clip_reps, text_reps, clip_perm, text_perm, clip_head, text_head),
            [clip_reps, text_reps] + _head_params(clip_head) + _head_params(text_head))
    raise ValueError(f"unknown objective {name!r}")


def check_losses(names=obj.OBJECTIVE_NAMES, seeds=range(5), shape: CheckShape = CheckShape(),
                 step: float = 1e-5) -> dict[str, float]:
    """Worst relative gradient error per objective over all ``seeds``."""
    worst = {}
    for name in names:
        errs = [ad.grad_check(p.fn, p.params, step=step)
                for p in (build_problem(name, s, shape) for s in seeds)]
        worst[name] = max(errs)
    return worst
