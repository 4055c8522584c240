"""Three-stage coarse-to-fine training loop.

Stage 1 fits the plain backbone on binary masks (multimodal + prompt
encoders trainable); stage 2 attaches a freshly initialized adaption
head, freezes the image encoder, and fits post-processed pseudo
heatmaps; stage 3 continues from the stage-2 checkpoint on human-style
heatmaps with a larger learning rate. A "combined" mode trains a single
stage on all three parts at once for ablation.

Every run is a pure function of (seed, config, manifest): shuffling,
drop-path draws and optimizer arithmetic are all seeded and ordered, so
checkpoints reproduce bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaption import AdaptionConfig
from .backbone import BackboneConfig, tokenize_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SampleRecord
from .errors import ConfigError
from .losses import LossConfig, loss_for_kind
from .model import AffordanceModel
from .pgm import read_pgm
from .tensor import Tensor

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class StageConfig:
    stage: int
    base_lr: float
    epochs: int
    warmup_epochs: int
    loss: str                       # combined_mask | weighted_focal
    trainable: tuple[str, ...]
    batch_size: int = 8             # desk-scale default; the full recipe uses 32
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 3.0
    drop_path: float = 0.1
    weight_decay: float = 0.0
    seed: int = 42

    def validate(self) -> "StageConfig":
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs / warmup_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in ("combined_mask", "weighted_focal"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        return self


_BACKBONE_GROUPS = ("multimodal_encoder", "prompt_encoder")
_UNFROZEN_GROUPS = ("multimodal_encoder", "prompt_encoder", "mask_decoder", "adaption")


def stage_defaults(stage: int, batch_size: int = 8, seed: int = 42) -> StageConfig:
    """Published per-stage recipe: LR 2e-5/2e-5/4e-5, 13/13/26 epochs,
    warmup 1/2/0, masks then heatmaps, image encoder frozen after
    stage 1."""
    if stage == 1:
        return StageConfig(stage=1, base_lr=2e-5, epochs=13, warmup_epochs=1,
                           loss="combined_mask", trainable=_BACKBONE_GROUPS,
                           batch_size=batch_size, seed=seed)
    if stage == 2:
        return StageConfig(stage=2, base_lr=2e-5, epochs=13, warmup_epochs=2,
                           loss="weighted_focal", trainable=_UNFROZEN_GROUPS,
                           batch_size=batch_size, seed=seed)
    if stage == 3:
        return StageConfig(stage=3, base_lr=4e-5, epochs=26, warmup_epochs=0,
                           loss="weighted_focal", trainable=_UNFROZEN_GROUPS,
                           batch_size=batch_size, seed=seed)
    raise ConfigError(f"no defaults for stage {stage}")


# -- schedule and optimizer ------------------------------------------------------


def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup 0 -> base over warmup_steps, then cosine decay to 0
    at the final step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"lr_at: step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: AdamWState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999),
               weight_decay: float = 0.0, eps: float = ADAM_EPS) -> None:
    """Decoupled-weight-decay adaptive update with bias correction. The
    whole step aborts (no parameter touched) on a non-finite gradient."""
    b1, b2 = betas
    for name in sorted(params):
        if not np.isfinite(grads[name]).all():
            raise ArithmeticError(f"adamw_step: non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    for name in sorted(params):
        p, g = params[name], grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 3.0,
                   ) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/norm when the global L2 norm
    exceeds max_norm."""
    sq = 0.0
    for name in sorted(grads):
        g = grads[name]
        sq += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return {name: g.copy() for name, g in grads.items()}
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


# -- data plumbing -----------------------------------------------------------------


class _StageData:
    """Preloaded images/labels/token ids for one record list."""

    def __init__(self, records: list[SampleRecord], data_root: Path, cfg: BackboneConfig):
        root = Path(data_root)
        self.ids = [r.id for r in records]
        self.images = np.stack([read_pgm(root / r.image_path)[None] for r in records])
        self.labels = np.stack([read_pgm(root / r.label_path) for r in records])
        self.tokens = tokenize_batch([r.prompt for r in records], cfg)

    def __len__(self) -> int:
        return len(self.ids)


# -- training loops -----------------------------------------------------------------


def run_stage(model: AffordanceModel, records: list[SampleRecord], data_root: Path,
              cfg: StageConfig, loss_cfg: LossConfig, state: AdamWState | None = None,
              expected_part: int | None = "auto", log=None) -> list[dict]:
    """Train one stage in place; returns per-epoch rows
    {epoch, mean_loss, lr}. ``expected_part`` defaults to the stage
    number; pass None for the combined all-parts mode."""
    cfg.validate()
    if expected_part == "auto":
        expected_part = cfg.stage
    if not records:
        raise ConfigError("run_stage: no training records")
    if expected_part is not None:
        bad = sorted({r.part for r in records} - {expected_part})
        if bad:
            raise ConfigError(
                f"run_stage: stage {cfg.stage} expects part {expected_part} records only, "
                f"got parts {sorted({r.part for r in records})}"
            )
    if cfg.stage > 1 and model.adaption is None:
        raise ConfigError(f"run_stage: stage {cfg.stage} requires the adaption head")

    data = _StageData(records, data_root, model.cfg)
    loss_fn = loss_for_kind(cfg.loss)
    trainable = dict(model.group_parameters(cfg.trainable))
    state = state if state is not None else AdamWState()

    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    shuffle_rng = np.random.default_rng([cfg.seed, cfg.stage, 11])
    drop_rng = np.random.default_rng([cfg.seed, cfg.stage, 13])

    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        losses = []
        lr = 0.0
        for b0 in range(0, n, cfg.batch_size):
            idx = perm[b0:b0 + cfg.batch_size]
            lr = lr_at(step, total_steps, cfg.base_lr, warmup_steps)
            logits = model.forward(data.images[idx], data.tokens[idx],
                                   drop_rng=drop_rng, drop_path=cfg.drop_path)
            loss = loss_fn(logits, data.labels[idx], loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise ArithmeticError(f"run_stage: non-finite loss at step {step}")
            model.zero_grad()
            loss.backward()
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for name, p in trainable.items()}
            grads = clip_gradients(grads, cfg.grad_clip)
            adamw_step(trainable, grads, state, lr, cfg.betas, cfg.weight_decay)
            losses.append(value)
            step += 1
        row = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr}
        curve.append(row)
        if log is not None:
            log(f"stage {cfg.stage} epoch {epoch}: loss {row['mean_loss']:.6f} lr {lr:.2e}")
    return curve


def checkpoint_tensors(model: AffordanceModel, state: AdamWState | None) -> dict[str, np.ndarray]:
    tensors = {name: p.data.copy() for name, p in model.named_parameters()}
    if state is not None:
        for name, arr in state.m.items():
            tensors[f"adam.m:{name}"] = arr.copy()
        for name, arr in state.v.items():
            tensors[f"adam.v:{name}"] = arr.copy()
    return tensors


def save_stage_checkpoint(path: Path, model: AffordanceModel, state: AdamWState | None,
                          config_doc: dict, config_hash: str, stage: int, epoch: int) -> None:
    meta = {
        "stage": stage,
        "epoch": epoch,
        "config": config_doc,
        "config_hash": config_hash,
        "adam_t": state.t if state is not None else 0,
        "has_adaption": model.adaption is not None,
    }
    save_checkpoint(path, checkpoint_tensors(model, state), meta)


def model_from_checkpoint(path: Path) -> tuple[AffordanceModel, dict]:
    """Rebuild a model (adaption head included when present) from a
    checkpoint; returns (model, meta)."""
    from .config import RunConfig  # deferred: config imports this module

    meta, tensors = load_checkpoint(path)
    run_cfg = RunConfig.from_dict(meta["config"])
    seed = run_cfg.stages[1].seed
    model = AffordanceModel(run_cfg.backbone, seed)
    if meta.get("has_adaption"):
        model.attach_adaption(run_cfg.adaption, run_cfg.stages[2].seed)
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    model.load_state_dict(params)
    return model, meta


def run_pipeline(records_by_part: dict[int, list[SampleRecord]], data_root: Path,
                 backbone_cfg: BackboneConfig, adaption_cfg: AdaptionConfig,
                 loss_cfg: LossConfig, stage_cfgs: dict[int, StageConfig],
                 out_dir: Path, stages: tuple[int, ...] = (1, 2, 3),
                 mode: str = "staged", init_checkpoint: Path | None = None,
                 config_doc: dict | None = None, config_hash: str = "",
                 log=None) -> dict[int, Path]:
    """Run the staged recipe (or the single-stage combined mode) and
    write one checkpoint plus one loss-curve CSV per stage under
    out_dir. Returns {stage: checkpoint path}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_doc = config_doc or {}

    if mode == "combined":
        cfg = stage_cfgs[2]
        model = AffordanceModel(backbone_cfg, seed=cfg.seed, adaption_cfg=adaption_cfg)
        records = [r for part in sorted(records_by_part) for r in records_by_part[part]]
        state = AdamWState()
        curve = run_stage(model, records, data_root, cfg, loss_cfg, state,
                          expected_part=None, log=log)
        path = out_dir / "checkpoint_combined.ckpt"
        save_stage_checkpoint(path, model, state, config_doc, config_hash,
                              stage=cfg.stage, epoch=cfg.epochs)
        _write_curve(out_dir / "loss_combined.csv", curve)
        return {0: path}
    if mode != "staged":
        raise ConfigError(f"run_pipeline: unknown mode {mode!r}")

    stages = tuple(sorted(stages))
    if stages[0] == 1:
        model = AffordanceModel(backbone_cfg, seed=stage_cfgs[1].seed)
    elif init_checkpoint is not None:
        model, _ = model_from_checkpoint(init_checkpoint)
    else:
        raise ConfigError("run_pipeline: stages starting past 1 need an init checkpoint")

    paths: dict[int, Path] = {}
    for stage in stages:
        cfg = stage_cfgs[stage]
        if stage >= 2 and model.adaption is None:
            model.attach_adaption(adaption_cfg, cfg.seed)
        state = AdamWState()
        curve = run_stage(model, records_by_part[stage], data_root, cfg, loss_cfg,
                          state, log=log)
        path = out_dir / f"checkpoint_stage{stage}.ckpt"
        save_stage_checkpoint(path, model, state, config_doc, config_hash,
                              stage=stage, epoch=cfg.epochs)
        _write_curve(out_dir / f"loss_stage{stage}.csv", curve)
        paths[stage] = path
    return paths


def _write_curve(path: Path, curve: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss,lr\n")
        for row in curve:
            fh.write(f"{row['epoch']},{row['mean_loss']:.9f},{row['lr']:.12e}\n")
