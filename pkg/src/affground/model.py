"""Full model: backbone forward with optional query-adaption injection.

Without the adaption head the forward pass is the plain text-prompted
segmentation path; with a zero-initialized head attached, the logits
are identical, which is the anchor for staged fine-tuning.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .adaption import AdaptionConfig, AdaptionModule
from .backbone import (BackboneConfig, ImageEncoder, MaskDecoder,
                       MultimodalEncoder, PromptEncoder, tokenize_batch)
from .losses import sigmoid_map
from .nn import Module, drop_path_scale
from .tensor import Tensor

GROUPS = ("multimodal_encoder", "prompt_encoder", "image_encoder",
          "mask_decoder", "adaption")


class AffordanceModel(Module):
    def __init__(self, cfg: BackboneConfig, seed: int,
                 adaption_cfg: AdaptionConfig | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 1])
        self.multimodal_encoder = MultimodalEncoder(cfg, rng)
        self.prompt_encoder = PromptEncoder(cfg, rng)
        self.image_encoder = ImageEncoder(cfg, rng)
        self.mask_decoder = MaskDecoder(cfg, rng)
        self.adaption: AdaptionModule | None = None
        if adaption_cfg is not None:
            self.attach_adaption(adaption_cfg, seed)

    def attach_adaption(self, adaption_cfg: AdaptionConfig, seed: int) -> None:
        """Add a freshly initialized adaption head; backbone weights are
        untouched (the head draws from its own seeded stream)."""
        self.adaption = AdaptionModule(self.cfg, adaption_cfg,
                                       np.random.default_rng([seed, 2]))

    def forward(self, images: np.ndarray, texts, drop_rng=None,
                drop_path: float = 0.0) -> Tensor:
        """images: (B, C, H, W) array; texts: list of prompt strings or a
        pre-tokenized (B, n_text) id array. Returns raw logits
        (B, output_size, output_size)."""
        ids = texts if isinstance(texts, np.ndarray) else tokenize_batch(texts, self.cfg)
        scale = drop_path_scale(drop_rng, drop_path)

        tokens = self.multimodal_encoder.embed_image(images)
        mm = self.multimodal_encoder.encode(tokens, ids, scale)
        prompt = self.prompt_encoder(mm.cls)
        vis = self.image_encoder.encode(images, scale)

        extra = None
        if self.adaption is not None:
            if self.adaption.cfg.query_context == "text+image":
                ctx = T.concat([mm.text_slice, mm.image_slice], axis=1)
            else:
                ctx = mm.text_slice
            extra = self.adaption(ctx, vis.taps)
        return self.mask_decoder(vis.final, prompt, extra)

    def predict(self, images: np.ndarray, texts) -> np.ndarray:
        """Inference helper: sigmoid heatmaps as plain arrays."""
        return sigmoid_map(self.forward(images, texts).data)

    def group_parameters(self, groups: tuple[str, ...]):
        """Parameters whose top-level component is in ``groups``."""
        for name, p in self.named_parameters():
            if name.split(".", 1)[0] in groups:
                yield name, p
