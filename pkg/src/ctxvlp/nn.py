"""Transformer building blocks and the encoder assemblies of the model.

Every block takes and returns :class:`~ctxvlp.autodiff.DiffTensor` values with
a leading batch axis: sequences are ``(N, S, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal samples truncated at two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def parameters(self, prefix: str = "") -> dict[str, DiffTensor]:
        found: dict[str, DiffTensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, DiffTensor) and val.trainable:
                found[name] = val
            elif isinstance(val, Module):
                found.update(val.parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        found.update(item.parameters(f"{name}.{i}."))
        return found


def _param(values, name=None) -> DiffTensor:
    return DiffTensor(values, trainable=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = _param(trunc_normal(rng, (d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: DiffTensor) -> DiffTensor:
        if x.shape[-1] != self.d_in:
            raise ad.DimensionError(f"Linear expects last axis {self.d_in}, got shape {x.shape}")
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int
    relative_bias: bool = False
    max_relative_distance: int = 64

    def __post_init__(self):
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads:
            raise ValueError(f"model dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.max_relative_distance <= 0:
            raise ValueError("max_relative_distance must be positive")


class RelPosBias(Module):
    """Learned per-head logit bias indexed by clipped signed distance (key - query)."""

    def __init__(self, heads: int, max_distance: int):
        self.heads = heads
        self.max_distance = max_distance
        self.table = _param(np.zeros((heads, 2 * max_distance + 1)))

    def bucket(self, q_pos, k_pos) -> np.ndarray:
        q_pos = np.asarray(q_pos, dtype=np.int64)
        k_pos = np.asarray(k_pos, dtype=np.int64)
        dist = np.clip(k_pos[None, :] - q_pos[:, None], -self.max_distance, self.max_distance)
        return dist + self.max_distance

    def __call__(self, q_pos, k_pos) -> DiffTensor:
        """Bias of shape ``(heads, len(q_pos), len(k_pos))``."""
        return ad.take(self.table, self.bucket(q_pos, k_pos), axis=1)


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.dim
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)
        self.rel_bias = RelPosBias(cfg.heads, cfg.max_relative_distance) if cfg.relative_bias else None

    def _heads(self, x: DiffTensor) -> DiffTensor:
        n, s, d = x.shape
        h = self.cfg.heads
        return ad.transpose(ad.reshape(x, (n, s, h, d // h)), (0, 2, 1, 3))

    def attention_weights(self, q_in: DiffTensor, kv_in: DiffTensor, positions=None) -> DiffTensor:
        q = self._heads(self.q_proj(q_in))
        k = self._heads(self.k_proj(kv_in))
        dh = self.cfg.dim // self.cfg.heads
        logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        if positions is not None:
            if self.rel_bias is None:
                raise ValueError("positions given but relative bias is disabled")
            logits = ad.add(logits, self.rel_bias(positions, positions))
        return ad.softmax(logits, axis=-1)

    def __call__(self, q_in: DiffTensor, kv_in: DiffTensor | None = None, positions=None) -> DiffTensor:
        """Scaled dot-product attention; ``kv_in`` defaults to ``q_in`` (self-attention)."""
        kv_in = q_in if kv_in is None else kv_in
        if q_in.shape[-1] != self.cfg.dim or kv_in.shape[-1] != self.cfg.dim:
            raise ad.DimensionError(
                f"attention dim {self.cfg.dim} does not match inputs {q_in.shape}, {kv_in.shape}")
        weights = self.attention_weights(q_in, kv_in, positions)
        v = self._heads(self.v_proj(kv_in))
        ctx = ad.matmul(weights, v)
        n, h, s, dh = ctx.shape
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, s, h * dh))
        return self.out_proj(merged)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention layer with a feed-forward sublayer."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg, rng)
        self.ln2 = LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, mlp_ratio * cfg.dim, rng)

    def __call__(self, x, positions=None):
        x = ad.add(x, self.attn(self.ln1(x), positions=positions))
        return ad.add(x, self.ffn(self.ln2(x)))


class CrossAttentionLayer(Module):
    """Pre-norm cross-attention: ``x`` queries ``context``; feed-forward optional."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, feed_forward: bool = True,
                 mlp_ratio: int = 2):
        self.ln_q = LayerNorm(cfg.dim)
        self.ln_kv = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg, rng)
        if feed_forward:
            self.ln2 = LayerNorm(cfg.dim)
            self.ffn = FeedForward(cfg.dim, mlp_ratio * cfg.dim, rng)
        else:
            self.ln2 = self.ffn = None

    def __call__(self, x, context):
        x = ad.add(x, self.attn(self.ln_q(x), self.ln_kv(context)))
        if self.ffn is not None:
            x = ad.add(x, self.ffn(self.ln2(x)))
        return x


class MlpHead(Module):
    """Two affine layers with a GELU in between."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.d_in, self.hidden, self.d_out = d_in, hidden, d_out
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


# ---------------------------------------------------------------- encoders

class VideoEncoder(Module):
    """Per-frame projection followed by temporal self-attention within a clip.

    Input ``(N, F, d_in)`` raw frame features, output ``(N, F, D)``.
    """

    def __init__(self, d_in: int, dim: int, heads: int, layers: int, rng: np.random.Generator):
        self.proj = Linear(d_in, dim, rng)
        cfg = AttentionConfig(dim, heads)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(layers)]
        self.ln_out = LayerNorm(dim)

    def __call__(self, frames) -> DiffTensor:
        x = self.proj(ad._t(frames))
        for layer in self.layers:
            x = layer(x)
        return self.ln_out(x)


class TextEncoder(Module):
    """Token lookup + learned positions + self-attention, with a prepended CLS vector."""

    def __init__(self, vocab: int, max_tokens: int, dim: int, heads: int, layers: int,
                 rng: np.random.Generator):
        self.vocab = vocab
        self.max_tokens = max_tokens
        self.tok_emb = _param(trunc_normal(rng, (vocab, dim)))
        self.cls = _param(trunc_normal(rng, (1, dim)))
        self.pos_emb = _param(trunc_normal(rng, (max_tokens + 1, dim)))
        cfg = AttentionConfig(dim, heads)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(layers)]
        self.ln_out = LayerNorm(dim)

    def __call__(self, tokens) -> tuple[DiffTensor, DiffTensor]:
        """Encode ``(N, L)`` token ids; returns ``(N, L+1, D)`` token states and ``(N, D)`` CLS."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        n, length = tokens.shape
        if length < 1 or length > self.max_tokens:
            raise ValueError(f"caption length {length} outside [1, {self.max_tokens}]")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise ValueError(f"token id outside vocabulary of size {self.vocab}")
        cls = ad.take(self.cls, np.zeros((n, 1), dtype=np.int64), axis=0)
        x = ad.concat([cls, ad.take(self.tok_emb, tokens, axis=0)], axis=1)
        x = ad.add(x, ad.index(self.pos_emb, slice(0, length + 1)))
        for layer in self.layers:
            x = layer(x)
        x = self.ln_out(x)
        return x, ad.index(x, (slice(None), 0))


class ContextEncoder(Module):
    """Self-attention stack across the clips of one video.

    With ``relative=True`` every layer adds a learned bias indexed by the
    clipped difference of the supplied integer positions; otherwise the
    encoder sees no positional signal at all.
    """

    def __init__(self, dim: int, heads: int, layers: int, rng: np.random.Generator,
                 relative: bool, max_relative_distance: int = 64):
        self.relative = relative
        cfg = AttentionConfig(dim, heads, relative, max_relative_distance)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(layers)]
        self.ln_out = LayerNorm(dim)

    def __call__(self, x, positions=None) -> DiffTensor:
        if self.relative and positions is None:
            raise ValueError("relative context encoder needs frame positions")
        if not self.relative:
            positions = None
        for layer in self.layers:
            x = layer(x, positions=positions)
        return self.ln_out(x)


class MultimodalEncoder(Module):
    """Alternating self-attention over frames and frame-to-text cross-attention.

    Frames act as queries so that every frame slot gets a fused feature.
    """

    def __init__(self, dim: int, heads: int, blocks: int, rng: np.random.Generator):
        cfg = AttentionConfig(dim, heads)
        self.self_layers = [EncoderLayer(cfg, rng) for _ in range(blocks)]
        self.cross_layers = [CrossAttentionLayer(cfg, rng) for _ in range(blocks)]
        self.ln_out = LayerNorm(dim)

    def __call__(self, frames, text_tokens) -> DiffTensor:
        x = frames
        for self_layer, cross_layer in zip(self.self_layers, self.cross_layers):
            x = self_layer(x)
            x = cross_layer(x, text_tokens)
        return self.ln_out(x)


class CopFusion(Module):
    """Single cross-attention layer: contextual frames query contextual texts."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.cross = CrossAttentionLayer(AttentionConfig(dim, heads), rng, feed_forward=False)

    def __call__(self, v_ctx, t_ctx) -> tuple[DiffTensor, DiffTensor]:
        """``v_ctx`` ``(B, C, F, D)``, ``t_ctx`` ``(B, C, D)`` -> clip reps ``(B, C, F*D)``, text reps."""
        b, c, f, d = v_ctx.shape
        if t_ctx.shape != (b, c, d):
            raise ad.DimensionError(f"cop fusion: frames {v_ctx.shape} vs texts {t_ctx.shape}")
        fused = self.cross(ad.reshape(v_ctx, (b, c * f, d)), t_ctx)
        return ad.reshape(fused, (b, c, f * d)), t_ctx
