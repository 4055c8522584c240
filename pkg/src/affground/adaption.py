"""Learnable-query adaption head.

A set of queries (one per visual token position) cross-attends first to
the multimodal text features, then to a simplex-weighted fusion of the
tapped image-encoder layers; each cross-attention block is followed by
one self-attention block. The processed queries are upscaled by two
transposed convolutions into mask-feature space and injected into the
decoder as an additive residual.

With ``zero_init`` (the default) every attention output projection and
the final transposed convolution start at zero, so a freshly attached
head leaves the underlying model's output exactly unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig
from .errors import ConfigError, DimensionError
from .nn import Linear, LayerNorm, Module, MultiHeadAttention, uniform_init
from .tensor import Tensor


@dataclass(frozen=True)
class AdaptionConfig:
    heads: int = 4
    multi_layer_fusion: bool = True   # False: use only the last tapped layer
    query_context: str = "text"       # "text" | "text+image"
    zero_init: bool = True

    def validate(self) -> "AdaptionConfig":
        if self.query_context not in ("text", "text+image"):
            raise ConfigError(f"query_context must be 'text' or 'text+image', got {self.query_context!r}")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        return self


class VisualFusion(Module):
    """F_v = sum_i alpha_i * Linear_i(G_i) with alpha = softmax(logits),
    so the fusion ratios always lie on the simplex."""

    def __init__(self, j: int, d: int, rng: np.random.Generator):
        if j < 1:
            raise ConfigError("fusion needs at least one tap")
        self.logits = Tensor(np.zeros(j), requires_grad=True)  # alpha starts uniform
        self.projections = [Linear(d, d, rng) for _ in range(j)]

    @property
    def alpha(self) -> np.ndarray:
        e = np.exp(self.logits.data - self.logits.data.max())
        return e / e.sum()

    def __call__(self, taps: list[Tensor]) -> Tensor:
        if len(taps) != len(self.projections):
            raise ConfigError(
                f"fuse_visual: got {len(taps)} taps for {len(self.projections)} fusion slots"
            )
        alpha = T.softmax(self.logits, axis=0)
        out = None
        for i, (tap, proj) in enumerate(zip(taps, self.projections)):
            term = T.mul(proj(tap), T.narrow(alpha, 0, i, 1))
            out = term if out is None else T.add(out, term)
        return out


class AdaptionModule(Module):
    def __init__(self, backbone_cfg: BackboneConfig, cfg: AdaptionConfig,
                 rng: np.random.Generator):
        cfg.validate()
        n, d_mm, d_sam = backbone_cfg.n_tokens, backbone_cfg.d_mm, backbone_cfg.d_sam
        grid = int(round(np.sqrt(n)))
        if grid * grid != n:
            raise ConfigError(f"adaption: token count {n} is not a perfect square")
        if d_mm % cfg.heads:
            raise ConfigError(f"adaption: width {d_mm} not divisible by {cfg.heads} heads")
        self.cfg = cfg
        self.grid = grid
        self.mask_channels = backbone_cfg.mask_channels

        self.queries = Tensor(uniform_init(rng, (n, d_mm), d_mm), requires_grad=True)
        self.fusion = VisualFusion(backbone_cfg.j_taps, d_sam, rng)
        self.kv_proj = Linear(d_sam, d_mm, rng)  # visual keys/values into query width

        z = cfg.zero_init
        self.ln_text = LayerNorm(d_mm)
        self.att_text = MultiHeadAttention(d_mm, d_mm, cfg.heads, rng, zero_out=z)
        self.ln_self1 = LayerNorm(d_mm)
        self.att_self1 = MultiHeadAttention(d_mm, d_mm, cfg.heads, rng, zero_out=z)
        self.ln_vis = LayerNorm(d_mm)
        self.att_vis = MultiHeadAttention(d_mm, d_mm, cfg.heads, rng, zero_out=z)
        self.ln_self2 = LayerNorm(d_mm)
        self.att_self2 = MultiHeadAttention(d_mm, d_mm, cfg.heads, rng, zero_out=z)

        c1 = backbone_cfg.d_sam // 4
        self.up1 = Tensor(uniform_init(rng, (d_mm, c1, 2, 2), d_mm), requires_grad=True)
        if z:
            self.up2 = Tensor(np.zeros((c1, self.mask_channels, 2, 2)), requires_grad=True)
        else:
            self.up2 = Tensor(uniform_init(rng, (c1, self.mask_channels, 2, 2), c1),
                              requires_grad=True)

    def fuse_visual(self, taps: list[Tensor]) -> Tensor:
        if self.cfg.multi_layer_fusion:
            return self.fusion(taps)
        return self.fusion.projections[-1](taps[-1])

    def run_adaption(self, text_feats: Tensor, fused_visual: Tensor,
                     text_mask: "np.ndarray | None" = None) -> Tensor:
        """Queries -> [cross-attn over text, self-attn] -> [cross-attn
        over fused visual, self-attn], pre-norm residual throughout."""
        b = text_feats.shape[0]
        if fused_visual.shape[0] != b:
            raise DimensionError(
                f"run_adaption: batch mismatch text {text_feats.shape} vs visual {fused_visual.shape}"
            )
        q = T.repeat_batch(self.queries, b)
        kv = self.kv_proj(fused_visual)
        q = T.add(q, self.att_text(self.ln_text(q), text_feats, text_mask))
        n1 = self.ln_self1(q)
        q = T.add(q, self.att_self1(n1, n1))
        q = T.add(q, self.att_vis(self.ln_vis(q), kv))
        n2 = self.ln_self2(q)
        q = T.add(q, self.att_self2(n2, n2))
        return q

    def project_to_mask_features(self, q_af: Tensor) -> Tensor:
        """Two 2x transposed convolutions onto the decoder's mask-feature
        grid. Bias-free, so zero queries map to zero features."""
        b, n, d = q_af.shape
        g = self.grid
        x = T.transpose(q_af, (0, 2, 1))
        x = T.reshape(x, (b, d, g, g))
        x = T.gelu(T.transposed_conv2x2(x, self.up1))
        return T.transposed_conv2x2(x, self.up2)

    def __call__(self, text_feats: Tensor, taps: list[Tensor],
                 text_mask: "np.ndarray | None" = None) -> Tensor:
        return self.project_to_mask_features(
            self.run_adaption(text_feats, self.fuse_visual(taps), text_mask))
