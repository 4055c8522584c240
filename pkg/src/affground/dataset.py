"""Dataset model for the three-part coarse-to-fine corpus: manifests,
prompt templating, split hygiene, pseudo-label generation, and the
synthetic desk-scale generator.

Manifests are JSON-lines, one record per line, with a reserved first
record (id "__header__") that carries provenance and counts. Part 1
records hold binary masks, part 2 post-processed pseudo heatmaps,
part 3 human-style heatmaps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .pgm import quantize, read_pgm, write_pgm
from .postproc import PostprocConfig, postprocess

HEADER_ID = "__header__"

LABEL_KIND_FOR_PART = {1: "binary_mask", 2: "pseudo_map", 3: "human_map"}

# Published sizes of the full-scale corpus, kept as manifest metadata for
# reference; never enforced at desk scale.
FULL_SCALE_COUNTS = {
    "part1": 39159,
    "part2": {"easy": 13323, "hard": 11889},
    "part3": {"easy": 1135, "hard": 868},
}

_ACTIONS = ["hold", "lift", "push", "pull", "twist", "press", "open", "wipe"]
_OBJECTS = ["cup", "pan", "knife", "hammer", "bottle", "brush",
            "spoon", "mug", "fork", "board", "cap", "bowl"]


def build_prompt(action: str, obj: str) -> str:
    """Text prompt for one sample: lowercase '<action> <object>'."""
    action = action.strip().lower()
    obj = obj.strip().lower()
    if not action or not obj:
        raise ValidationError("build_prompt: action and object must be nonempty")
    return f"{action} {obj}"


@dataclass
class SampleRecord:
    id: str
    image_path: str
    label_path: str
    label_kind: str  # binary_mask | pseudo_map | human_map
    action: str
    object: str
    part: int        # 1 | 2 | 3
    split: str       # easy | hard
    subset: str      # train | test
    source: str = "synthetic"

    def validate(self) -> "SampleRecord":
        if self.part not in (1, 2, 3):
            raise ValidationError(f"record {self.id}: part must be 1, 2 or 3")
        expected = LABEL_KIND_FOR_PART[self.part]
        if self.label_kind != expected:
            raise ValidationError(
                f"record {self.id}: part {self.part} requires label_kind "
                f"{expected!r}, got {self.label_kind!r}"
            )
        if self.split not in ("easy", "hard"):
            raise ValidationError(f"record {self.id}: bad split {self.split!r}")
        if self.subset not in ("train", "test"):
            raise ValidationError(f"record {self.id}: bad subset {self.subset!r}")
        build_prompt(self.action, self.object)
        return self

    @property
    def prompt(self) -> str:
        return build_prompt(self.action, self.object)


def write_manifest(path: Path, header: dict, records: list[SampleRecord]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        head = {"id": HEADER_ID, **header}
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def read_manifest(path: Path) -> tuple[dict, list[SampleRecord]]:
    path = Path(path)
    header: dict = {}
    records: list[SampleRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if lineno == 0 and obj.get("id") == HEADER_ID:
                header = {k: v for k, v in obj.items() if k != "id"}
                continue
            rec = SampleRecord(**obj).validate()
            if rec.id in seen:
                raise ValidationError(f"{path}: duplicate record id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return header, records


def validate_manifest_files(path: Path) -> list[str]:
    """Returns the referenced files that do not exist."""
    path = Path(path)
    root = path.parent
    _, records = read_manifest(path)
    missing = []
    for rec in records:
        for rel in (rec.image_path, rec.label_path):
            if not (root / rel).exists():
                missing.append(f"{rec.id}: {rel}")
    return missing


def validate_hard_split(records: list[SampleRecord]) -> dict:
    """Intersect object categories of the hard-split train and test
    subsets; any overlap is a validation failure."""
    train = {r.object for r in records if r.split == "hard" and r.subset == "train"}
    test = {r.object for r in records if r.split == "hard" and r.subset == "test"}
    if not train or not test:
        raise ValidationError("validate_hard_split: no hard-split train/test records")
    overlap = sorted(train & test)
    return {
        "train_objects": sorted(train),
        "test_objects": sorted(test),
        "overlap": overlap,
        "ok": not overlap,
    }


def generate_pseudo_labels(raw_map_dir: Path, cfg: PostprocConfig,
                           records: list[SampleRecord], out_dir: Path,
                           ) -> tuple[dict, list[SampleRecord], list[str]]:
    """Post-process raw heatmaps (raw_map_dir/<id>.pgm) into pseudo
    labels under out_dir/labels. Records without a raw map are skipped
    and listed. Returns (manifest header, labeled records, skipped ids)."""
    raw_map_dir = Path(raw_map_dir)
    out_dir = Path(out_dir)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    cfg.validate()

    labeled: list[SampleRecord] = []
    skipped: list[str] = []
    for rec in records:
        if rec.part != 2:
            continue
        raw_path = raw_map_dir / f"{rec.id}.pgm"
        if not raw_path.exists():
            skipped.append(rec.id)
            continue
        raw = read_pgm(raw_path)
        label_rel = f"labels/{rec.id}.pgm"
        write_pgm(out_dir / label_rel, postprocess(raw, cfg))
        labeled.append(SampleRecord(
            id=rec.id, image_path=rec.image_path, label_path=label_rel,
            label_kind="pseudo_map", action=rec.action, object=rec.object,
            part=2, split=rec.split, subset=rec.subset, source=rec.source,
        ))
    header = {
        "kind": "pseudo_labels",
        "postproc": {"gamma": cfg.gamma, "num_filtrations": cfg.num_filtrations},
        "counts": {"part2": len(labeled)},
        "skipped": skipped,
    }
    return header, labeled, skipped


# -- synthetic generator -------------------------------------------------------

# Instances per (object, action) pair written for each training part and
# for the held-out test subset.
_TRAIN_INSTANCES = {1: 2, 2: 2, 3: 1}
_TEST_INSTANCES = 1


def _object_name(i: int) -> str:
    return _OBJECTS[i] if i < len(_OBJECTS) else f"obj{i:02d}"


def _action_name(j: int) -> str:
    return _ACTIONS[j] if j < len(_ACTIONS) else f"act{j}"


def _blob_geometry(seed: int, obj: int, size: int):
    """Fixed per object: center, radii and orientation of an ellipse."""
    rng = np.random.default_rng([seed, 101, obj])
    cy = size * (0.40 + 0.20 * rng.random())
    cx = size * (0.40 + 0.20 * rng.random())
    ry = size * (0.22 + 0.08 * rng.random())
    rx = size * (0.22 + 0.08 * rng.random())
    return cy, cx, ry, rx


def _blob_mask(seed: int, obj: int, size: int) -> np.ndarray:
    cy, cx, ry, rx = _blob_geometry(seed, obj, size)
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def region_mask(seed: int, obj: int, action: int, size: int) -> np.ndarray:
    """Label region for an (object, action) pair: one quadrant of the
    blob, chosen by the action index. Quadrants are pairwise disjoint,
    so different actions on the same object never share label pixels.
    Pure function of its arguments."""
    blob = _blob_mask(seed, obj, size)
    cy, cx, _, _ = _blob_geometry(seed, obj, size)
    yy, xx = np.mgrid[0:size, 0:size]
    top, left = yy <= cy, xx <= cx
    quadrant = (top & left, ~top & ~left, top & ~left, ~top & left)[action % 4]
    return blob & quadrant


def _heatmap_from_region(region: np.ndarray, size: int) -> np.ndarray:
    heat = gaussian_filter(region.astype(np.float64), sigma=size / 16.0)
    peak = heat.max()
    return heat / peak if peak > 0 else heat


def _render_image(seed: int, obj: int, size: int, inst_key: list[int]) -> np.ndarray:
    rng = np.random.default_rng(inst_key)
    blob = _blob_mask(seed, obj, size)
    img = 0.05 + 0.10 * rng.random((size, size))
    fill = 0.55 + 0.25 * rng.random()
    img[blob] = fill + 0.08 * rng.random(blob.sum())
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(seed: int, n_objects: int, n_actions: int,
                               size: int, out_dir: Path,
                               postproc_cfg: PostprocConfig = PostprocConfig(),
                               ) -> dict[str, Path]:
    """Write a complete desk-scale dataset: blob images, three label
    parts, raw (pre-filter) part-2 maps, and one manifest per
    (split, subset). Byte-deterministic for a fixed seed.

    Returns {"<split>_<subset>": manifest path}.
    """
    if n_objects < 1 or n_actions < 1 or size < 16:
        raise ValidationError("generate_synthetic_dataset: sizes must be >= 1 (size >= 16)")
    out_dir = Path(out_dir)
    for sub in ("images", "labels", "raw_maps"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    # Hard split holds out the last quarter of object ids (at least one).
    n_test_objects = max(1, n_objects // 4)
    hard_train_objects = list(range(n_objects - n_test_objects))
    hard_test_objects = list(range(n_objects - n_test_objects, n_objects))
    split_objects = {
        "easy": {"train": list(range(n_objects)), "test": list(range(n_objects))},
        "hard": {"train": hard_train_objects, "test": hard_test_objects},
    }

    manifests: dict[str, Path] = {}
    for split in ("easy", "hard"):
        for subset in ("train", "test"):
            records = []
            parts = _TRAIN_INSTANCES if subset == "train" else {3: _TEST_INSTANCES}
            for obj in split_objects[split][subset]:
                for part, n_inst in sorted(parts.items()):
                    for inst in range(n_inst):
                        # One image per (object, instance); all actions are
                        # labeled on it, so only the prompt disambiguates
                        # which region applies.
                        for act in range(n_actions):
                            records.append(_write_sample(
                                out_dir, seed, split, subset, part, obj, act,
                                inst, size, postproc_cfg))
            counts = {f"part{p}": sum(1 for r in records if r.part == p) for p in (1, 2, 3)}
            header = {
                "kind": "synthetic",
                "seed": seed,
                "n_objects": n_objects,
                "n_actions": n_actions,
                "image_size": size,
                "split": split,
                "subset": subset,
                "counts": counts,
                "postproc": {"gamma": postproc_cfg.gamma,
                             "num_filtrations": postproc_cfg.num_filtrations},
                "full_scale_reference": FULL_SCALE_COUNTS,
            }
            path = out_dir / f"manifest_{split}_{subset}.jsonl"
            write_manifest(path, header, records)
            manifests[f"{split}_{subset}"] = path
    return manifests


def _write_sample(out_dir: Path, seed: int, split: str, subset: str, part: int,
                  obj: int, act: int, inst: int, size: int,
                  postproc_cfg: PostprocConfig) -> SampleRecord:
    split_idx = 0 if split == "easy" else 1
    subset_idx = 0 if subset == "train" else 1
    sample_id = f"{split}_p{part}_o{obj:02d}_a{act}_{subset}{inst}"
    image_id = f"{split}_p{part}_o{obj:02d}_{subset}{inst}"
    image_key = [seed, 303, split_idx, subset_idx, part, obj, inst]

    image_path = out_dir / "images" / f"{image_id}.pgm"
    if not image_path.exists():
        write_pgm(image_path, _render_image(seed, obj, size, image_key))

    region = region_mask(seed, obj, act, size)
    if part == 1:
        label = region.astype(np.float64)
    elif part == 3:
        label = _heatmap_from_region(region, size)
    else:
        # Raw pseudo map: the true heatmap plus a faint off-target lobe and
        # noise, mimicking low-thermal artifacts; the stored label is the
        # post-processed version of the quantized raw file.
        rng = np.random.default_rng([seed, 404, split_idx, subset_idx, part, obj, act, inst])
        heat = _heatmap_from_region(region, size)
        phantom = 1000 + obj * 7 + act  # unrelated geometry for the stray lobe
        decoy = _heatmap_from_region(region_mask(seed, phantom, (act + 1) % 4, size), size)
        raw = np.clip(heat + 0.3 * decoy + 0.08 * rng.random((size, size)), 0.0, 1.0)
        raw_q = quantize(raw).astype(np.float64) / 255.0
        write_pgm(out_dir / "raw_maps" / f"{sample_id}.pgm", raw_q)
        label = postprocess(raw_q, postproc_cfg)
    write_pgm(out_dir / "labels" / f"{sample_id}.pgm", label)

    return SampleRecord(
        id=sample_id,
        image_path=f"images/{image_id}.pgm",
        label_path=f"labels/{sample_id}.pgm",
        label_kind=LABEL_KIND_FOR_PART[part],
        action=_action_name(act),
        object=_object_name(obj),
        part=part,
        split=split,
        subset=subset,
    ).validate()
