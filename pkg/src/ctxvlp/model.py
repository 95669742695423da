"""Full video-language model: dual encoders, context encoders, multimodal
encoder, order-prediction fusion and heads, plus the learnable temperature."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .autodiff import DiffTensor
from .data import build_ftm_labels
from .nn import (ContextEncoder, CopFusion, MlpHead, Module, MultimodalEncoder, TextEncoder,
                 VideoEncoder)


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 32
    vocab_size: int = 50
    max_tokens: int = 16
    dim: int = 32
    heads: int = 2
    encoder_layers: int = 2
    context_layers: int = 4
    context_heads: int = 2
    max_relative_distance: int = 64
    mme_blocks: int = 2
    head_hidden: int = 32
    clips: int = 8
    frames: int = 4
    sigma_init: float = 0.07

    def to_dict(self) -> dict:
        return asdict(self)


class VideoTextModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.dim
        self.video_encoder = VideoEncoder(cfg.feature_dim, d, cfg.heads, cfg.encoder_layers, rng)
        self.text_encoder = TextEncoder(cfg.vocab_size, cfg.max_tokens, d, cfg.heads,
                                        cfg.encoder_layers, rng)
        self.video_context = ContextEncoder(d, cfg.context_heads, cfg.context_layers, rng,
                                            relative=True,
                                            max_relative_distance=cfg.max_relative_distance)
        self.text_context = ContextEncoder(d, cfg.context_heads, cfg.context_layers, rng,
                                           relative=False)
        self.multimodal = MultimodalEncoder(d, cfg.heads, cfg.mme_blocks, rng)
        self.ftm_head = MlpHead(d, cfg.head_hidden, 1, rng)
        self.cop_fusion = CopFusion(d, cfg.heads, rng)
        self.cop_clip_head = MlpHead(cfg.frames * d, cfg.head_hidden, cfg.clips, rng)
        self.cop_text_head = MlpHead(d, cfg.head_hidden, cfg.clips, rng)
        self.log_sigma = DiffTensor(math.log(cfg.sigma_init), trainable=True)

    @property
    def sigma(self) -> float:
        return math.exp(self.log_sigma.item())

    # ------------------------------------------------------------ encoders

    def encode_clips(self, frames) -> DiffTensor:
        """``(B, C, F, D_in)`` raw features -> ``(B, C, F, D)`` frame embeddings."""
        frames = np.asarray(frames, dtype=np.float64)
        b, c, f, d_in = frames.shape
        v = self.video_encoder(frames.reshape(b * c, f, d_in))
        return ad.reshape(v, (b, c, f, self.cfg.dim))

    def encode_texts(self, tokens) -> tuple[DiffTensor, DiffTensor]:
        """``(B, C, L)`` ids -> token states ``(B*C, L+1, D)`` and CLS ``(B, C, D)``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        b, c, length = tokens.shape
        states, cls = self.text_encoder(tokens.reshape(b * c, length))
        return states, ad.reshape(cls, (b, c, self.cfg.dim))

    def contextualize_video(self, v, positions) -> DiffTensor:
        b, c, f, d = v.shape
        out = self.video_context(ad.reshape(v, (b, c * f, d)), positions)
        return ad.reshape(out, (b, c, f, d))

    def contextualize_text(self, t) -> DiffTensor:
        return self.text_context(t)

    # ------------------------------------------------------------ training forward

    def losses(self, frames, tokens, positions, enabled: dict[str, bool], *,
               shuffle=None, use_context: bool = True, normalize: bool = True,
               symmetric: bool = False) -> obj.LossBundle:
        """Compute every enabled objective for one batch.

        Only the sub-graphs feeding enabled objectives are evaluated, so
        parameters used exclusively by disabled ones receive no gradient.
        """
        if not any(enabled.get(k) for k in obj.OBJECTIVE_NAMES):
            raise ValueError("at least one objective must be enabled")
        b, c, f, _ = np.shape(frames)
        v = self.encode_clips(frames)
        states, t = self.encode_texts(tokens)
        comps: dict[str, DiffTensor] = {}
        if enabled.get("vtc"):
            comps["vtc"] = obj.vtc_loss(v, t, self.log_sigma, normalize)
        if any(enabled.get(k) for k in ("vtc_ctx", "cycle", "cop")):
            if use_context:
                v_ctx = self.contextualize_video(v, positions)
                t_ctx = self.contextualize_text(t)
            else:
                v_ctx, t_ctx = v, t
            if enabled.get("vtc_ctx"):
                comps["vtc_ctx"] = obj.vtc_ctx_loss(v_ctx, t_ctx, self.log_sigma, normalize, symmetric)
            if enabled.get("cycle"):
                comps["cycle"] = obj.cycle_loss(v_ctx, t_ctx, self.log_sigma, normalize)
            if enabled.get("cop"):
                if shuffle is None:
                    raise ValueError("order prediction needs a shuffle")
                clip_reps, text_reps = self.cop_fusion(v_ctx, t_ctx)
                comps["cop"] = obj.cop_loss(clip_reps, text_reps, shuffle.clip_perm, shuffle.text_perm,
                                            self.cop_clip_head, self.cop_text_head)
        if enabled.get("ftm"):
            fused = self.fuse_per_text(v, states)
            labels = np.tile(build_ftm_labels(c, f), (b, 1))
            comps["ftm"] = obj.ftm_loss(fused, labels, self.ftm_head)
        return obj.total_loss(comps, enabled)

    def fuse_per_text(self, v, text_states) -> DiffTensor:
        """One multimodal pass per caption over all frames of its video: ``(B*C, C*F, D)``."""
        b, c, f, d = v.shape
        flat = ad.reshape(v, (b, c * f, d))
        repeated = ad.take(flat, np.repeat(np.arange(b), c), axis=0)
        return self.multimodal(repeated, text_states)

    def cop_predictions(self, frames, tokens, positions, shuffle) -> tuple[np.ndarray, np.ndarray]:
        """Predicted original slot for each shuffled clip and text (inference)."""
        with ad.no_tape():
            v = self.encode_clips(frames)
            _, t = self.encode_texts(tokens)
            clip_reps, text_reps = self.cop_fusion(self.contextualize_video(v, positions),
                                                   self.contextualize_text(t))
            clip_logits, text_logits = obj.cop_logits(clip_reps, text_reps, shuffle.clip_perm,
                                                      shuffle.text_perm, self.cop_clip_head,
                                                      self.cop_text_head)
        return clip_logits.values.argmax(-1), text_logits.values.argmax(-1)
