"""Command-line front end.

Subcommands: synth (synthetic dataset), curate (manifest validation and
pseudo-label generation), postprocess (batch cascade filter), train
(staged recipe), infer (single forward pass), eval (KLD/SIM/NSS report)
and verify (gradient + oracle suites). Every output directory receives
a provenance.json recording the tool version, flags and config hash;
reports are written as JSON + CSV with a rendered PNG alongside.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, default_run_config, dump_run_config, load_run_config
from .dataset import (generate_pseudo_labels, generate_synthetic_dataset,
                      read_manifest, validate_hard_split, validate_manifest_files)
from .errors import ValidationError
from .losses import sigmoid_map
from .metrics import evaluate_split
from .pgm import read_pgm, write_pgm
from .postproc import PostprocConfig, postprocess
from .trainer import model_from_checkpoint, run_pipeline
from .verify import format_results, run_suites


def _write_provenance(out_dir: Path, command: str, args: dict, config_hash: str = "") -> None:
    doc = {
        "tool": "affground",
        "version": __version__,
        "command": command,
        "args": {k: str(v) for k, v in sorted(args.items())},
        "config_hash": config_hash,
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "provenance.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _prepare_out_dir(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise SystemExit(f"error: output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_synth(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    manifests = generate_synthetic_dataset(
        seed=args.seed, n_objects=args.objects, n_actions=args.actions,
        size=args.size, out_dir=out)
    _write_provenance(out, "synth", {
        "seed": args.seed, "objects": args.objects, "actions": args.actions,
        "size": args.size})
    for key, path in sorted(manifests.items()):
        print(f"wrote {key}: {path}")
    return 0


def cmd_curate_validate(args) -> int:
    missing = validate_manifest_files(args.manifest)
    _, records = read_manifest(args.manifest)
    try:
        report = validate_hard_split(records)
    except ValidationError:
        report = {"train_objects": [], "test_objects": [], "overlap": [],
                  "ok": None, "note": "no hard-split records"}
    report["missing_files"] = missing
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    if missing or report.get("ok") is False:
        return 1
    return 0


def cmd_curate_pseudo(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PostprocConfig(gamma=args.gamma, num_filtrations=args.filtrations).validate()
    manifest_path = Path(args.manifest)
    _, records = read_manifest(manifest_path)
    src_root = manifest_path.parent.resolve()
    header, labeled, skipped = generate_pseudo_labels(args.raw_dir, cfg, records, out)
    # Keep image references resolvable from the new manifest location.
    for rec in labeled:
        rec.image_path = str((src_root / rec.image_path).resolve())
    from .dataset import write_manifest
    write_manifest(out / "manifest_part2.jsonl", header, labeled)
    _write_provenance(out, "curate pseudo", {
        "raw_dir": args.raw_dir, "manifest": args.manifest,
        "gamma": args.gamma, "filtrations": args.filtrations})
    print(f"labeled {len(labeled)} records; skipped {len(skipped)}")
    if not labeled:
        print("warning: no part-2 records were labeled", file=sys.stderr)
    for sid in skipped:
        print(f"missing raw map: {sid}", file=sys.stderr)
    return 0


def cmd_postprocess(args) -> int:
    in_dir = Path(args.in_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PostprocConfig(gamma=args.gamma, num_filtrations=args.filtrations).validate()
    failures = []
    n = 0
    for path in sorted(in_dir.glob("*.pgm")):
        try:
            write_pgm(out / path.name, postprocess(read_pgm(path), cfg))
            n += 1
        except (ValueError, OSError) as exc:
            failures.append(f"{path.name}: {exc}")
    _write_provenance(out, "postprocess", {
        "in": args.in_dir, "gamma": args.gamma, "filtrations": args.filtrations})
    print(f"processed {n} maps -> {out}")
    for line in failures:
        print(f"failed: {line}", file=sys.stderr)
    return 1 if failures else 0


def _parse_stages(text: str) -> tuple[str, tuple[int, ...]]:
    if text.strip().lower() == "all":
        return "combined", ()
    stages = tuple(sorted(int(s) for s in text.split(",") if s.strip()))
    if not stages or any(s not in (1, 2, 3) for s in stages):
        raise SystemExit(f"error: bad --stages value {text!r} (use e.g. 1,2,3 or all)")
    return "staged", stages


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    mode, stages = _parse_stages(args.stages)
    data_root = Path(args.data_root)
    manifest = data_root / f"manifest_{args.split}_train.jsonl"
    _, records = read_manifest(manifest)
    records_by_part = {p: [r for r in records if r.part == p] for p in (1, 2, 3)}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = run_pipeline(
        records_by_part, data_root, cfg.backbone, cfg.adaption, cfg.loss,
        cfg.stages, out, stages=stages or (1, 2, 3), mode=mode,
        init_checkpoint=Path(args.init_checkpoint) if args.init_checkpoint else None,
        config_doc=cfg.to_dict(), config_hash=cfg.hash(),
        log=print if args.verbose else None)

    curves = {}
    for csv_path in sorted(out.glob("loss_*.csv")):
        with open(csv_path) as fh:
            rows = [{"epoch": int(r["epoch"]), "mean_loss": float(r["mean_loss"])}
                    for r in csv.DictReader(fh)]
        curves[csv_path.stem.removeprefix("loss_")] = rows
    if curves:
        from .figures import plot_loss_curves
        plot_loss_curves(curves, out / "loss_curves.png")

    _write_provenance(out, "train", {
        "data_root": args.data_root, "split": args.split, "stages": args.stages},
        config_hash=cfg.hash())
    for stage, path in sorted(paths.items()):
        print(f"stage {stage or 'combined'}: {path}")
    return 0


def cmd_infer(args) -> int:
    if not args.prompt.strip():
        raise SystemExit("error: --prompt must be nonempty")
    model, meta = model_from_checkpoint(args.checkpoint)
    image = read_pgm(args.image)
    if image.shape != (model.cfg.image_size, model.cfg.image_size):
        raise SystemExit(
            f"error: image is {image.shape}, model expects "
            f"({model.cfg.image_size}, {model.cfg.image_size})")
    logits = model.forward(image[None, None], [args.prompt.strip().lower()])
    heat = sigmoid_map(logits.data[0])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    write_pgm(out / f"{stem}_heatmap.pgm", heat)
    np.save(out / f"{stem}_heatmap.npy", heat)
    _write_provenance(out, "infer", {
        "checkpoint": args.checkpoint, "image": args.image, "prompt": args.prompt},
        config_hash=meta.get("config_hash", ""))
    print(f"wrote {out / f'{stem}_heatmap.pgm'} (peak {heat.max():.4f})")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_split(Path(args.pred_dir), Path(args.manifest))
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    from .figures import plot_metric_report
    plot_metric_report(report, out / "report.png")
    _write_provenance(out, "eval", {
        "pred_dir": args.pred_dir, "manifest": args.manifest})
    print(f"kld {report.kld:.4f}  sim {report.sim:.4f}  nss {report.nss:.4f}  "
          f"n {report.n_samples}")
    if report.missing:
        for sid in report.missing:
            print(f"missing prediction: {sid}", file=sys.stderr)
        return 2
    return 0


def cmd_verify(args) -> int:
    results = run_suites(args.suite)
    print(format_results(results))
    return 0 if all(r.ok for r in results) else 1


def cmd_default_config(args) -> int:
    cfg = default_run_config()
    if args.out:
        dump_run_config(cfg, args.out)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="affground",
        description="Affordance heatmap toolkit: synthesize data, train the "
                    "staged model, post-process maps and evaluate predictions.")
    parser.add_argument("--version", action="version", version=f"affground {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic desk-scale dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--actions", type=int, default=3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth)

    cur = sub.add_parser("curate", help="manifest validation and pseudo labels")
    cur_sub = cur.add_subparsers(dest="curate_command", required=True)
    p = cur_sub.add_parser("validate", help="check files and hard-split hygiene")
    p.add_argument("--manifest", required=True)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_curate_validate)
    p = cur_sub.add_parser("pseudo", help="post-process raw maps into part-2 labels")
    p.add_argument("--raw-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, default=0.45)
    p.add_argument("--filtrations", type=int, default=3)
    p.set_defaults(fn=cmd_curate_pseudo)

    p = sub.add_parser("postprocess", help="cascade-filter a directory of maps")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, default=0.45)
    p.add_argument("--filtrations", type=int, default=3)
    p.set_defaults(fn=cmd_postprocess)

    p = sub.add_parser("train", help="run the staged training recipe")
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--stages", default="1,2,3", help="e.g. 1,2,3 or 1 or all")
    p.add_argument("--split", choices=("easy", "hard"), default="easy")
    p.add_argument("--init-checkpoint")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="predict one heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run gradient and oracle suites")
    p.add_argument("--suite", choices=("all", "grad", "oracle"), default="all")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("default-config", help="print or write the default run config")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_default_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
