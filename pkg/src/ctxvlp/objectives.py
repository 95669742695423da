"""Training objectives: clip-text contrast (plain and contextual), cycle
consistency, frame-text matching and clip order prediction.

Shapes used throughout: ``B`` videos, ``C`` clips per video, ``F`` frames per
clip, ``D`` embedding width.  Frame embeddings are ``(B, C, F, D)`` and text
embeddings ``(B, C, D)``.  The temperature is passed as its logarithm so that
it stays positive under any update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor

PROB_FLOOR = 1e-7
NORM_FLOOR = 1e-12
OBJECTIVE_NAMES = ("vtc", "vtc_ctx", "cycle", "ftm", "cop")


def pooled_frames(frames, normalize: bool = True) -> DiffTensor:
    """Mean over the frame axis (second to last) of (optionally unit-length) frames."""
    frames = ad._t(frames)
    if normalize:
        frames = ad.l2_normalize(frames, axis=-1, eps=NORM_FLOOR)
    return ad.mean(frames, axis=-2)


def _texts(texts, normalize: bool) -> DiffTensor:
    texts = ad._t(texts)
    return ad.l2_normalize(texts, axis=-1, eps=NORM_FLOOR) if normalize else texts


def _inv_sigma(log_sigma) -> DiffTensor:
    return ad.exp(ad.neg(ad._t(log_sigma)))


def clip_text_similarity(frames, text, log_sigma, normalize: bool = True) -> DiffTensor:
    """``(1 / (F sigma)) * sum_f <v_f, t>`` for one clip ``(F, D)`` and one text ``(D,)``."""
    frames = ad._t(frames)
    v = pooled_frames(ad.reshape(frames, (1,) + frames.shape), normalize)
    t = _texts(ad.reshape(ad._t(text), (1, -1)), normalize)
    return ad.reshape(ad.mul(ad.matmul(v, ad.transpose(t)), _inv_sigma(log_sigma)), ())


def similarity_matrix(frames, texts, log_sigma, normalize: bool = True) -> DiffTensor:
    """Pairwise clip-text similarities.

    ``frames`` ``(..., N, F, D)`` against ``texts`` ``(..., M, D)`` gives
    ``(..., N, M)``; leading axes must agree.
    """
    v = pooled_frames(frames, normalize)
    t = _texts(texts, normalize)
    return ad.mul(ad.matmul(v, ad.transpose(t)), _inv_sigma(log_sigma))


def cross_entropy_rows(logits, targets) -> DiffTensor:
    """Mean categorical cross-entropy of row-wise softmax, probabilities clamped before the log."""
    logits = ad._t(logits)
    targets = np.asarray(targets, dtype=np.int64)
    probs = ad.softmax(logits, axis=-1)
    lead = tuple(np.indices(targets.shape))
    picked = ad.index(probs, lead + (targets,))
    return ad.mean(ad.neg(ad.log(ad.clip(picked, PROB_FLOOR, 1.0 - PROB_FLOOR))))


def binary_cross_entropy(probs, labels) -> DiffTensor:
    """Mean BCE with probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    p = ad.clip(ad._t(probs), PROB_FLOOR, 1.0 - PROB_FLOOR)
    m = np.asarray(labels, dtype=np.float64)
    if m.shape != p.shape:
        raise ad.DimensionError(f"label shape {m.shape} does not match predictions {p.shape}")
    pos = ad.mul(ad.log(p), m)
    negative = ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - m)
    return ad.neg(ad.mean(ad.add(pos, negative)))


def vtc_loss(frames, texts, log_sigma, normalize: bool = True) -> DiffTensor:
    """Symmetric InfoNCE over all ``B*C`` clip-text pairs of the batch."""
    frames, texts = ad._t(frames), ad._t(texts)
    b, c, f, d = frames.shape
    if b * c < 2:
        raise ValueError("contrastive loss needs at least two clip-text pairs")
    sims = similarity_matrix(ad.reshape(frames, (b * c, f, d)), ad.reshape(texts, (b * c, d)),
                             log_sigma, normalize)
    diag = np.arange(b * c)
    v2t = cross_entropy_rows(sims, diag)
    t2v = cross_entropy_rows(ad.transpose(sims), diag)
    return ad.scale(ad.add(v2t, t2v), 0.5)


def vtc_ctx_loss(frames_ctx, texts_ctx, log_sigma, normalize: bool = True,
                 symmetric: bool = False) -> DiffTensor:
    """Contextual contrast: each contextual clip against every contextual text in the batch.

    The default is the one-directional clip-to-text form; ``symmetric`` also
    adds the text-to-clip direction and averages the two.
    """
    frames_ctx, texts_ctx = ad._t(frames_ctx), ad._t(texts_ctx)
    b, c, f, d = frames_ctx.shape
    if b * c < 2:
        raise ValueError("contrastive loss needs at least two clip-text pairs")
    sims = similarity_matrix(ad.reshape(frames_ctx, (b * c, f, d)), ad.reshape(texts_ctx, (b * c, d)),
                             log_sigma, normalize)
    diag = np.arange(b * c)
    loss = cross_entropy_rows(sims, diag)
    if symmetric:
        loss = ad.scale(ad.add(loss, cross_entropy_rows(ad.transpose(sims), diag)), 0.5)
    return loss


@dataclass
class SimilarityBundle:
    """Per-video similarity and probability matrices, each ``(B, C, C)``."""

    s_v2t: DiffTensor
    s_t2v: DiffTensor
    p_v2t: DiffTensor
    p_t2v: DiffTensor
    roundtrip: DiffTensor


def cycle_bundle(frames_ctx, texts_ctx, log_sigma, normalize: bool = True) -> SimilarityBundle:
    frames_ctx = ad._t(frames_ctx)
    if frames_ctx.shape[1] < 2:
        raise ValueError("cycle consistency needs at least two clips per video")
    s_v2t = similarity_matrix(frames_ctx, texts_ctx, log_sigma, normalize)
    s_t2v = ad.transpose(s_v2t)
    p_v2t = ad.softmax(s_v2t, axis=-1)
    p_t2v = ad.softmax(s_t2v, axis=-1)
    return SimilarityBundle(s_v2t, s_t2v, p_v2t, p_t2v, ad.matmul(p_v2t, p_t2v))


def roundtrip_penalty(roundtrip) -> DiffTensor:
    """Mean over videos of the squared Frobenius distance to the identity."""
    roundtrip = ad._t(roundtrip)
    eye = np.eye(roundtrip.shape[-1])
    diff = ad.sub(roundtrip, eye)
    per_video = ad.sum_(ad.mul(diff, diff), axis=(-2, -1))
    return ad.mean(per_video)


def cycle_loss(frames_ctx, texts_ctx, log_sigma, normalize: bool = True) -> DiffTensor:
    return roundtrip_penalty(cycle_bundle(frames_ctx, texts_ctx, log_sigma, normalize).roundtrip)


def ftm_loss(fused, labels, head) -> DiffTensor:
    """BCE of per-frame match probabilities.

    ``fused`` holds one multimodal pass per text: ``(B*C, C*F, D)``;
    ``labels`` is ``(B*C, C*F)`` (see :func:`ctxvlp.data.build_ftm_labels`).
    """
    fused = ad._t(fused)
    labels = np.asarray(labels)
    if labels.shape != fused.shape[:2]:
        raise ad.DimensionError(f"ftm labels {labels.shape} do not match frame slots {fused.shape[:2]}")
    logits = ad.reshape(head(fused), labels.shape)
    return binary_cross_entropy(ad.sigmoid(logits), labels)


def shuffle_rows(reps, perm) -> DiffTensor:
    """Reorder each video's slots: ``out[b, j] = reps[b, perm[b, j]]``."""
    perm = np.asarray(perm, dtype=np.int64)
    rows = np.arange(perm.shape[0])[:, None]
    return ad.index(ad._t(reps), (rows, perm))


def cop_logits(clip_reps, text_reps, clip_perm, text_perm, clip_head, text_head):
    return (clip_head(shuffle_rows(clip_reps, clip_perm)),
            text_head(shuffle_rows(text_reps, text_perm)))


def _check_perm(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    c = perm.shape[-1]
    if not np.all(np.sort(perm, axis=-1) == np.arange(c)):
        raise ValueError("order targets are not permutations")
    return perm


def cop_loss(clip_reps, text_reps, clip_perm, text_perm, clip_head, text_head) -> DiffTensor:
    """Order classification of shuffled clip and text representations.

    Slot ``j`` of video ``b`` holds the item originally at ``perm[b, j]``, which
    is its target class.  Clip and text terms are averaged.
    """
    clip_perm, text_perm = _check_perm(clip_perm), _check_perm(text_perm)
    clip_logits, text_logits = cop_logits(clip_reps, text_reps, clip_perm, text_perm,
                                          clip_head, text_head)
    return ad.scale(ad.add(cross_entropy_rows(clip_logits, clip_perm),
                           cross_entropy_rows(text_logits, text_perm)), 0.5)


@dataclass
class LossBundle:
    """Enabled loss components (absent ones are ``None``) and their equal-weight sum."""

    components: dict[str, DiffTensor | None] = field(default_factory=dict)
    total: DiffTensor | None = None

    def value(self, name: str) -> float | None:
        t = self.components.get(name)
        return None if t is None else t.item()

    def __getattr__(self, name):
        if name in OBJECTIVE_NAMES:
            return self.components.get(name)
        raise AttributeError(name)


def total_loss(components: dict[str, DiffTensor | None], enabled: dict[str, bool]) -> LossBundle:
    """Unweighted sum of the enabled components."""
    unknown = set(enabled) - set(OBJECTIVE_NAMES)
    if unknown:
        raise ValueError(f"unknown objectives: {sorted(unknown)}")
    active = [name for name in OBJECTIVE_NAMES if enabled.get(name)]
    if not active:
        raise ValueError("at least one objective must be enabled")
    kept = {name: (components.get(name) if enabled.get(name) else None) for name in OBJECTIVE_NAMES}
    missing = [name for name in active if kept[name] is None]
    if missing:
        raise ValueError(f"enabled objectives without a value: {missing}")
    total = kept[active[0]]
    for name in active[1:]:
        total = ad.add(total, kept[name])
    return LossBundle(kept, total)
