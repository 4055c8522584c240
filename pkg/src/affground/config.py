"""Single run-configuration document: backbone dims, adaption head,
losses, post-processing and the three stage recipes, serialized as one
JSON object. Unknown keys are rejected at every level and a canonical
hash of the document is stamped into checkpoints, reports and
provenance files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .adaption import AdaptionConfig
from .backbone import BackboneConfig
from .errors import ConfigError
from .losses import LossConfig
from .postproc import PostprocConfig
from .trainer import StageConfig, stage_defaults


def _build(cls, doc: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**doc)


def _stage_from_dict(doc: dict, where: str) -> StageConfig:
    doc = dict(doc)
    if "betas" in doc:
        doc["betas"] = tuple(doc["betas"])
    if "trainable" in doc:
        doc["trainable"] = tuple(doc["trainable"])
    return _build(StageConfig, doc, where).validate()


@dataclass
class RunConfig:
    backbone: BackboneConfig
    adaption: AdaptionConfig
    loss: LossConfig
    postproc: PostprocConfig
    stages: dict[int, StageConfig]

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.adaption.validate()
        self.loss.validate()
        self.postproc.validate()
        if sorted(self.stages) != [1, 2, 3]:
            raise ConfigError(f"config: stages must cover 1, 2, 3; got {sorted(self.stages)}")
        for k, s in self.stages.items():
            s.validate()
            if s.stage != k:
                raise ConfigError(f"config: stages[{k}] declares stage {s.stage}")
        return self

    def to_dict(self) -> dict:
        return {
            "backbone": dataclasses.asdict(self.backbone),
            "adaption": dataclasses.asdict(self.adaption),
            "loss": dataclasses.asdict(self.loss),
            "postproc": dataclasses.asdict(self.postproc),
            "stages": {str(k): dataclasses.asdict(v) for k, v in sorted(self.stages.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = sorted(set(doc) - {"backbone", "adaption", "loss", "postproc", "stages"})
        if unknown:
            raise ConfigError(f"config: unknown top-level keys {unknown}")
        stages = {int(k): _stage_from_dict(v, f"stages[{k}]")
                  for k, v in doc.get("stages", {}).items()}
        cfg = cls(
            backbone=_build(BackboneConfig, doc.get("backbone", {}), "backbone"),
            adaption=_build(AdaptionConfig, doc.get("adaption", {}), "adaption"),
            loss=_build(LossConfig, doc.get("loss", {}), "loss"),
            postproc=_build(PostprocConfig, doc.get("postproc", {}), "postproc"),
            stages=stages or default_stages(),
        )
        return cfg.validate()

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def default_stages(batch_size: int = 8, seed: int = 42) -> dict[int, StageConfig]:
    return {s: stage_defaults(s, batch_size=batch_size, seed=seed) for s in (1, 2, 3)}


def default_run_config() -> RunConfig:
    return RunConfig(
        backbone=BackboneConfig(),
        adaption=AdaptionConfig(),
        loss=LossConfig(),
        postproc=PostprocConfig(),
        stages=default_stages(),
    ).validate()


def load_run_config(path: Path | None) -> RunConfig:
    if path is None:
        return default_run_config()
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return RunConfig.from_dict(doc)


def dump_run_config(cfg: RunConfig, path: Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
