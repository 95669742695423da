"""Zero-shot recognition protocol.

Videos are read as a 1 FPS frame stream, cut into non-overlapping windows of
``w`` frames, and each window is classified by similarity to class prompts.
Base scores use the dual-encoder embeddings; contextual scores use the
context encoders, which see every window of the video (and every class
prompt of one prompt variant) jointly.  Each prompt variant is a separate
full evaluation; metrics are averaged over variants at the end.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import PROMPT_VARIANTS, BatchSpec, Corpus, PromptSet, SamplerSchedule, sample_batch, \
    shuffle_for_cop
from .model import VideoTextModel

log = logging.getLogger(__name__)

FUSION_MODES = ("averaged", "contextual", "base")
TASKS = ("single-label", "multi-label")
SWEEP_WINDOWS = (1, 2, 4, 8, 16, 32)


@dataclass(frozen=True)
class EvalConfig:
    window: int = 4
    fps: float = 1.0
    fusion: str = "averaged"
    task: str = "single-label"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least one frame")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, not {self.fusion!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, not {self.task!r}")


# ---------------------------------------------------------------- prompts

@dataclass
class PromptEmbeddings:
    """Arrays of shape ``(variants, classes, D)``; class order follows ``labels``."""

    labels: list[int]
    base: np.ndarray
    contextual: np.ndarray


def _encode_token_lists(model: VideoTextModel, token_lists: list[list[int]]) -> np.ndarray:
    out = np.empty((len(token_lists), model.cfg.dim))
    by_len: dict[int, list[int]] = {}
    for i, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise ValueError("empty prompt")
        by_len.setdefault(len(toks), []).append(i)
    for idx in by_len.values():
        _, cls = model.text_encoder(np.array([token_lists[i] for i in idx]))
        out[idx] = cls.values
    return out


def encode_prompts(prompts: PromptSet, model: VideoTextModel) -> PromptEmbeddings:
    """Base CLS embedding for every prompt; contextual embeddings per variant.

    The K class prompts of one variant go through the position-free text
    context encoder together, as the clips of a single pseudo-video.
    """
    base, ctx = [], []
    with ad.no_tape():
        for k in range(PROMPT_VARIANTS):
            cls = _encode_token_lists(model, prompts.variant(k))
            base.append(cls)
            ctx.append(model.contextualize_text(ad.DiffTensor(cls[None])).values[0])
    return PromptEmbeddings(prompts.labels, np.stack(base), np.stack(ctx))


# ---------------------------------------------------------------- scoring

def partition_windows(n_frames: int, w: int) -> list[tuple[int, int]]:
    """Non-overlapping ``[start, stop)`` windows; the last one may be shorter."""
    if n_frames < 1:
        raise ValueError("empty video")
    if n_frames < w:
        log.warning("video of %d frames is shorter than the %d-frame window", n_frames, w)
    return [(s, min(s + w, n_frames)) for s in range(0, n_frames, w)]


def window_labels(frame_labels: np.ndarray, windows: list[tuple[int, int]]) -> np.ndarray:
    """Majority frame label per window; ties go to the label that appears first."""
    out = np.empty(len(windows), dtype=np.int64)
    for i, (a, b) in enumerate(windows):
        seg = frame_labels[a:b]
        labels, first, counts = np.unique(seg, return_index=True, return_counts=True)
        best = counts.max()
        out[i] = labels[first == first[counts == best].min()][0]
    return out


@dataclass
class VideoEmbeddings:
    windows: list[tuple[int, int]]
    base: np.ndarray                 # (N, D) per-frame, dual encoder
    contextual: np.ndarray | None    # (N, D) per-frame, video context encoder


def embed_video(model: VideoTextModel, frames: np.ndarray, window: int,
                contextual: bool = True) -> VideoEmbeddings:
    """Encode each window with the video encoder, then all frames with the context encoder.

    Context positions are global frame indices of the stream.
    """
    frames = np.asarray(frames, dtype=np.float64)
    windows = partition_windows(len(frames), window)
    base = np.empty((len(frames), model.cfg.dim))
    with ad.no_tape():
        by_len: dict[int, list[tuple[int, int]]] = {}
        for a, b in windows:
            by_len.setdefault(b - a, []).append((a, b))
        for group in by_len.values():
            stacked = np.stack([frames[a:b] for a, b in group])
            enc = model.video_encoder(stacked).values
            for (a, b), e in zip(group, enc):
                base[a:b] = e
        ctx = None
        if contextual:
            ctx = model.video_context(ad.DiffTensor(base[None]), np.arange(len(frames))).values[0]
    return VideoEmbeddings(windows, base, ctx)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def window_scores(frame_emb: np.ndarray, windows, prompt_emb: np.ndarray, sigma: float,
                  normalize: bool = True) -> np.ndarray:
    """Clip-text similarity of every window against every class prompt: ``(windows, classes)``."""
    f = _unit(frame_emb) if normalize else frame_emb
    p = _unit(prompt_emb) if normalize else prompt_emb
    pooled = np.stack([f[a:b].mean(axis=0) for a, b in windows])
    return pooled @ p.T / sigma


def fuse_scores(base: np.ndarray, contextual: np.ndarray | None, fusion: str) -> np.ndarray:
    if fusion == "base":
        return base
    if contextual is None:
        raise ValueError(f"fusion {fusion!r} needs contextual scores")
    if fusion == "contextual":
        return contextual
    if fusion == "averaged":
        return 0.5 * (base + contextual)
    raise ValueError(f"unknown fusion mode {fusion!r}")


def score_video(model: VideoTextModel, frames: np.ndarray, prompt_base: np.ndarray,
                prompt_ctx: np.ndarray, window: int, fusion: str = "averaged",
                normalize: bool = True) -> np.ndarray:
    """Per-window, per-class scores for one prompt variant."""
    emb = embed_video(model, frames, window, contextual=fusion != "base")
    return _scores_from_embeddings(emb, prompt_base, prompt_ctx, model.sigma, fusion, normalize)


def _scores_from_embeddings(emb, prompt_base, prompt_ctx, sigma, fusion, normalize=True):
    base = window_scores(emb.base, emb.windows, prompt_base, sigma, normalize)
    ctx = None
    if fusion != "base":
        ctx = window_scores(emb.contextual, emb.windows, prompt_ctx, sigma, normalize)
    return fuse_scores(base, ctx, fusion)


# ---------------------------------------------------------------- metrics

def per_video_macro_f1(predictions, labels) -> float:
    """Macro-F1 over the classes occurring in either the predictions or the labels."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.size == 0 or pred.shape != true.shape:
        raise ValueError("need equally long, non-empty prediction and label sequences")
    scores = []
    for c in np.union1d(pred, true):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def dataset_f1(per_video: dict[str, float] | list[float]) -> float:
    """Unweighted mean of per-video F1 scores."""
    vals = list(per_video.values()) if isinstance(per_video, dict) else list(per_video)
    if not vals:
        raise ValueError("no videos to aggregate")
    return float(np.mean(vals))


def average_precision(scores, positives) -> float:
    """Mean of the precision at the rank of each positive (descending score, stable ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives).astype(bool)
    if not positives.any():
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def multilabel_map(scores, labels) -> tuple[float, dict[int, float]]:
    """Mean AP over classes (columns) with at least one positive; returns (mAP, per-class AP)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    per_class = {}
    for c in range(scores.shape[1]):
        if not labels[:, c].any():
            log.info("class column %d has no positives; excluded from mAP", c)
            continue
        per_class[c] = average_precision(scores[:, c], labels[:, c])
    if not per_class:
        raise ValueError("no class has a positive sample")
    return float(np.mean(list(per_class.values()))), per_class


@dataclass
class MetricsReport:
    dataset: str
    window: int
    fusion: str
    task: str
    per_video_f1: list[dict[str, float]] = field(default_factory=list)   # one dict per variant
    variant_f1: list[float] = field(default_factory=list)
    variant_map: list[float] = field(default_factory=list)

    @property
    def f1(self) -> float:
        """Prompt-averaged dataset F1."""
        return float(np.mean(self.variant_f1))

    @property
    def map(self) -> float:
        return float(np.mean(self.variant_map))

    def summary(self) -> str:
        lines = [f"dataset {self.dataset}: window={self.window} fusion={self.fusion} task={self.task}"]
        for k, (f1, mp) in enumerate(zip(self.variant_f1, self.variant_map)):
            lines.append(f"  prompt variant {k}: F1 {f1:.4f}  mAP {mp:.4f}")
        lines.append(f"  prompt-averaged F1 {self.f1:.4f}  mAP {self.map:.4f}")
        return "\n".join(lines)


def evaluate_variant(model, corpus: Corpus, prompt_emb: PromptEmbeddings, variant: int,
                     cfg: EvalConfig, cache: dict | None = None) -> tuple[dict[str, float], float, float]:
    """One full evaluation with a single prompt variant: per-video F1, dataset F1, mAP."""
    labels = np.array(prompt_emb.labels)
    per_video: dict[str, float] = {}
    all_scores, all_truth = [], []
    for video in corpus.videos:
        frames, frame_labels = video.frame_stream()
        key = (video.video_id, cfg.window)
        emb = None if cache is None else cache.get(key)
        if emb is None:
            emb = embed_video(model, frames, cfg.window, contextual=cfg.fusion != "base")
            if cache is not None:
                cache[key] = emb
        scores = _scores_from_embeddings(emb, prompt_emb.base[variant], prompt_emb.contextual[variant],
                                         model.sigma, cfg.fusion)
        truth = window_labels(frame_labels, emb.windows)
        per_video[video.video_id] = per_video_macro_f1(labels[scores.argmax(axis=1)], truth)
        all_scores.append(scores)
        all_truth.append(truth)
    onehot = (np.concatenate(all_truth)[:, None] == labels[None, :])
    map_value, _ = multilabel_map(np.concatenate(all_scores), onehot)
    return per_video, dataset_f1(per_video), map_value


def evaluate(model: VideoTextModel, corpus: Corpus, prompts: PromptSet,
             cfg: EvalConfig = EvalConfig(), cache: dict | None = None) -> MetricsReport:
    prompt_emb = encode_prompts(prompts, model)
    report = MetricsReport(corpus.name, cfg.window, cfg.fusion, cfg.task)
    cache = {} if cache is None else cache
    for k in range(PROMPT_VARIANTS):
        per_video, f1, mp = evaluate_variant(model, corpus, prompt_emb, k, cfg, cache)
        report.per_video_f1.append(per_video)
        report.variant_f1.append(f1)
        report.variant_map.append(mp)
    return report


def temporal_window_sweep(model: VideoTextModel, corpus: Corpus, prompts: PromptSet,
                          windows=SWEEP_WINDOWS, fusion: str = "averaged",
                          task: str = "single-label") -> tuple[list[dict], list[MetricsReport]]:
    """Full evaluation per window size; rows carry ``window, dataset, f1, map``."""
    rows, reports = [], []
    for w in windows:
        rep = evaluate(model, corpus, prompts, EvalConfig(window=w, fusion=fusion, task=task))
        reports.append(rep)
        rows.append({"window": w, "dataset": corpus.name, "f1": rep.f1, "map": rep.map})
    return rows, reports


# ---------------------------------------------------------------- order prediction

def cop_accuracy(model: VideoTextModel, corpus: Corpus, spec: BatchSpec, batches: int = 20,
                 seed: int = 0) -> tuple[float, float]:
    """Slot accuracy of order prediction on clips sampled without a window limit.

    Returns (clip accuracy, text accuracy).
    """
    rng = np.random.default_rng(seed)
    schedule = SamplerSchedule(2, corpus.t_max, progressive=False)
    clip_hits = text_hits = total = 0
    for _ in range(batches):
        batch = sample_batch(corpus, 0, rng, spec, schedule)
        shuffle = shuffle_for_cop(spec.videos, spec.clips, rng)
        clip_pred, text_pred = model.cop_predictions(batch.frames, batch.tokens, batch.positions, shuffle)
        clip_hits += int((clip_pred == shuffle.clip_perm).sum())
        text_hits += int((text_pred == shuffle.text_perm).sum())
        total += shuffle.clip_perm.size
    return clip_hits / total, text_hits / total
