"""Toy-dimension backbone: multimodal encoder, prompt encoder, image
encoder with per-block feature taps, and a two-way mask decoder.

The component boundaries and tensor shapes mirror a full-scale
text-prompted segmentation stack (CLS+image+text token layout, tapped
encoder blocks, 4x upscaled mask features, hypernet-style per-pixel dot
product) at dimensions small enough for exhaustive finite-difference
checks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import (Linear, LayerNorm, MLP, Module, MultiHeadAttention,
                 TransformerBlock, uniform_init)
from .tensor import Tensor

PAD_ID = 0


@dataclass(frozen=True)
class BackboneConfig:
    d_sam: int = 64          # image-branch token width
    d_mm: int = 48           # multimodal token width
    image_size: int = 64
    patch_size: int = 16
    n_text: int = 8          # max text tokens
    j_taps: int = 4          # tapped encoder blocks fused downstream
    depth: int = 4
    heads: int = 4
    vocab_size: int = 512
    in_channels: int = 1

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        # shared by both branches: the surrogate patchifies at one scale
        return self.grid * self.grid

    @property
    def mask_channels(self) -> int:
        return self.d_sam // 8

    @property
    def mask_grid(self) -> int:
        return 4 * self.grid

    @property
    def output_size(self) -> int:
        return 4 * self.mask_grid

    def validate(self) -> "BackboneConfig":
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        if self.d_sam % self.heads or self.d_mm % self.heads:
            raise ConfigError(f"widths ({self.d_sam}, {self.d_mm}) must divide by heads {self.heads}")
        if self.d_sam % 8:
            raise ConfigError(f"d_sam {self.d_sam} must be a multiple of 8 (mask channels)")
        if not 1 <= self.j_taps <= self.depth:
            raise ConfigError(f"j_taps {self.j_taps} must be in [1, depth={self.depth}]")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        return self


def tokenize(text: str, cfg: BackboneConfig) -> np.ndarray:
    """Whitespace-split then hash each word into the vocabulary;
    padded/truncated to n_text. Hashing is process-independent."""
    words = text.split()
    if not words:
        raise ValueError("tokenize: empty text")
    ids = np.full(cfg.n_text, PAD_ID, dtype=np.intp)
    for i, w in enumerate(words[:cfg.n_text]):
        digest = hashlib.sha256(w.encode("utf-8")).digest()
        ids[i] = 1 + int.from_bytes(digest[:8], "little") % (cfg.vocab_size - 1)
    return ids


def tokenize_batch(texts: list[str], cfg: BackboneConfig) -> np.ndarray:
    return np.stack([tokenize(t, cfg) for t in texts])


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, HW/p^2, C*p*p) row-major patch vectors."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise DimensionError(f"patchify: {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)


@dataclass
class MultimodalOutput:
    full: Tensor        # (B, 1 + N_m + N_t, D_m)
    cls: Tensor         # (B, 1, D_m): row 0 of full
    text_slice: Tensor  # (B, N_t, D_m): trailing rows of full
    image_slice: Tensor  # (B, N_m, D_m)
    text_mask: np.ndarray | None = None  # (B, N_t) booleans, False at padding


@dataclass
class VisualTaps:
    taps: list[Tensor]       # j tensors, each (B, N_s, D_s)
    final: Tensor            # (B, N_s, D_s)


class MultimodalEncoder(Module):
    """Joint encoder over [CLS; image tokens; text tokens]."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        d = cfg.d_mm
        patch_dim = cfg.in_channels * cfg.patch_size ** 2
        self.cfg = cfg
        self.patch_embed = Linear(patch_dim, d, rng)
        self.tok_embed = Tensor(uniform_init(rng, (cfg.vocab_size, d), d), requires_grad=True)
        self.cls_token = Tensor(uniform_init(rng, (1, d), d), requires_grad=True)
        self.pos = Tensor(uniform_init(rng, (1 + cfg.n_tokens + cfg.n_text, d), d),
                          requires_grad=True)
        self.blocks = [TransformerBlock(d, cfg.heads, rng) for _ in range(cfg.depth)]
        self.ln_out = LayerNorm(d)

    def embed_image(self, images: np.ndarray) -> Tensor:
        return self.patch_embed(Tensor(patchify(images, self.cfg.patch_size)))

    def encode(self, image_tokens: Tensor, text_ids: np.ndarray,
               branch_scale=None) -> MultimodalOutput:
        cfg = self.cfg
        b, n_m, d = image_tokens.shape
        if n_m != cfg.n_tokens or d != cfg.d_mm:
            raise DimensionError(
                f"encode_multimodal: image tokens {image_tokens.shape} != "
                f"(B, {cfg.n_tokens}, {cfg.d_mm})"
            )
        if text_ids.shape != (b, cfg.n_text):
            raise DimensionError(
                f"encode_multimodal: text ids {text_ids.shape} != ({b}, {cfg.n_text})"
            )
        cls = T.repeat_batch(self.cls_token, b)
        text = T.embedding(self.tok_embed, text_ids)
        x = T.concat([cls, image_tokens, text], axis=1)
        x = T.add(x, self.pos)
        # Padding text positions never serve as attention keys.
        key_mask = np.concatenate(
            [np.ones((b, 1 + n_m), dtype=bool), text_ids != PAD_ID], axis=1)
        for blk in self.blocks:
            x = blk(x, branch_scale, key_mask)
        x = self.ln_out(x)
        n_total = 1 + n_m + cfg.n_text
        return MultimodalOutput(
            full=x,
            cls=T.narrow(x, 1, 0, 1),
            image_slice=T.narrow(x, 1, 1, n_m),
            text_slice=T.narrow(x, 1, n_total - cfg.n_text, cfg.n_text),
            text_mask=text_ids != PAD_ID,
        )


class ImageEncoder(Module):
    """Patch transformer that records j intermediate block outputs."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        d = cfg.d_sam
        self.cfg = cfg
        self.patch_embed = Linear(cfg.in_channels * cfg.patch_size ** 2, d, rng)
        self.pos = Tensor(uniform_init(rng, (cfg.n_tokens, d), d), requires_grad=True)
        self.blocks = [TransformerBlock(d, cfg.heads, rng) for _ in range(cfg.depth)]
        self.ln_out = LayerNorm(d)
        # Evenly spaced taps ending at the last block.
        self.tap_indices = [(k + 1) * cfg.depth // cfg.j_taps - 1 for k in range(cfg.j_taps)]

    def encode(self, images: np.ndarray, branch_scale=None) -> VisualTaps:
        cfg = self.cfg
        if images.ndim != 4 or images.shape[2:] != (cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"encode_image: expected (B, C, {cfg.image_size}, {cfg.image_size}), "
                f"got {images.shape}"
            )
        x = self.patch_embed(Tensor(patchify(images, cfg.patch_size)))
        x = T.add(x, self.pos)
        taps = []
        for i, blk in enumerate(self.blocks):
            x = blk(x, branch_scale)
            if i in self.tap_indices:
                taps.append(x)
        return VisualTaps(taps=taps, final=self.ln_out(x))


class PromptEncoder(Module):
    """Projects the multimodal CLS output into the decoder token width."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.mlp = MLP(cfg.d_mm, cfg.d_mm, rng, d_out=cfg.d_sam)

    def __call__(self, cls_out: Tensor) -> Tensor:
        return self.mlp(cls_out)


class MaskDecoder(Module):
    """Two rounds of bidirectional token/visual cross-attention, a 4x
    transposed-conv upscale to the mask-feature grid, an optional
    residual mask-feature injection, then a hypernet dot product and a
    fixed 4x nearest upsample to the output grid."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        d = cfg.d_sam
        self.cfg = cfg
        self.output_token = Tensor(uniform_init(rng, (1, d), d), requires_grad=True)
        self.t2v = [MultiHeadAttention(d, d, cfg.heads, rng) for _ in range(2)]
        self.v2t = [MultiHeadAttention(d, d, cfg.heads, rng) for _ in range(2)]
        self.ln_t = [LayerNorm(d) for _ in range(2)]
        self.ln_v = [LayerNorm(d) for _ in range(2)]
        self.up1 = Tensor(uniform_init(rng, (d, d // 4, 2, 2), d), requires_grad=True)
        self.up2 = Tensor(uniform_init(rng, (d // 4, d // 8, 2, 2), d // 4), requires_grad=True)
        self.hyper = MLP(d, d, rng, d_out=d // 8)

    def __call__(self, visual: Tensor, prompt: Tensor,
                 extra_mask_features: Tensor | None = None) -> Tensor:
        cfg = self.cfg
        b = visual.shape[0]
        if visual.shape[1:] != (cfg.n_tokens, cfg.d_sam):
            raise DimensionError(
                f"decode_mask: visual {visual.shape} != (B, {cfg.n_tokens}, {cfg.d_sam})"
            )
        tokens = T.concat([T.repeat_batch(self.output_token, b), prompt], axis=1)
        for i in range(2):
            tokens = T.add(tokens, self.t2v[i](self.ln_t[i](tokens), visual))
            visual = T.add(visual, self.v2t[i](self.ln_v[i](visual), tokens))

        g = cfg.grid
        feat = T.transpose(visual, (0, 2, 1))
        feat = T.reshape(feat, (b, cfg.d_sam, g, g))
        feat = T.gelu(T.transposed_conv2x2(feat, self.up1))
        feat = T.gelu(T.transposed_conv2x2(feat, self.up2))
        if extra_mask_features is not None:
            if extra_mask_features.shape != feat.shape:
                raise DimensionError(
                    f"decode_mask: extra mask features {extra_mask_features.shape} "
                    f"do not match the internal grid {feat.shape}"
                )
            feat = T.add(feat, extra_mask_features)

        weights = self.hyper(T.narrow(tokens, 1, 0, 1))  # (B, 1, C')
        m = cfg.mask_grid
        flat = T.reshape(feat, (b, cfg.mask_channels, m * m))
        logits = T.reshape(T.matmul(weights, flat), (b, m, m))
        return T.upsample_nearest(logits, 4)
