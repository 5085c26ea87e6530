"""Command line: synth, train, detect, eval, bench and ablate.

Every command exits 0 on success. Failures print a single line
``error: <Kind>: <message>`` on stderr and exit nonzero (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

from .ablation import run_ablation
from .cascade import CascadeConfig, detect, detections_to_json
from .dataset import default_splits, generate_toy_corpus, load_corpus, save_corpus
from .evaluation import evaluate_corpus, timing_table
from .imageio import draw_detections, load_image, save_image
from .networks import build_network, load_weights, save_weights
from .pipeline import default_stage_settings, settings_dict, train_single
from .training import LossWeights, write_curves_csv

KINDS = ("pnet", "rnet", "onet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _finite(obj):
    """Replace NaN and infinities by ``null`` so the output stays strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def dump_json(obj, path: str | Path | None = None) -> str:
    text = json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def load_flat_config(path: str | Path | None) -> tuple[CascadeConfig, dict]:
    """Split a flat JSON file into a :class:`CascadeConfig` and loss-weight overrides."""
    if path is None:
        return CascadeConfig(), {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    cascade_keys = {f.name for f in fields(CascadeConfig)}
    loss_keys = {f.name for f in fields(LossWeights)}
    unknown = set(data) - cascade_keys - loss_keys
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    config = CascadeConfig.from_dict({k: v for k, v in data.items() if k in cascade_keys})
    return config, {k: v for k, v in data.items() if k in loss_keys}


def load_cascade(weights_dir: str | Path) -> dict:
    root = Path(weights_dir)
    nets = {}
    for kind in KINDS:
        path = root / f"{kind}.bin"
        if not path.is_file():
            raise FileNotFoundError(f"missing weights file {path}")
        nets[kind] = load_weights(path)
        nets[kind].trained = True
    return nets


def _corpus_split(corpus_dir: str | Path, split: str) -> list:
    manifest = json.loads((Path(corpus_dir) / "manifest.json").read_text())
    if split not in manifest["splits"]:
        return []
    return load_corpus(corpus_dir, split)


def cmd_synth(args) -> dict:
    items = generate_toy_corpus(args.n, size=args.size, seed=args.seed)
    meta = {"n": args.n, "seed": args.seed, "size": args.size}
    save_corpus(items, args.out, default_splits(args.n, args.val, args.test), meta=meta)
    return {"out": str(args.out), **meta}


def _stage_settings(kind: str, args, loss: dict):
    s = default_stage_settings()[kind]
    if "lr" in loss:
        s.lr = float(loss.pop("lr"))
    if args.lr is not None:
        s.lr = args.lr
    if args.epochs is not None:
        s.epochs = args.epochs
    if args.batches_per_epoch is not None:
        s.batches_per_epoch = args.batches_per_epoch
    return s


def _train_one_stage(kind, args, train, val, prefix, config, loss, out: Path) -> dict:
    settings = _stage_settings(kind, args, dict(loss))
    overrides = {k: v for k, v in loss.items() if k != "lr"}
    result = train_single(kind, train, val, prefix, settings, config, args.seed,
                          ohem=not args.no_ohem, landmark=not args.no_landmark, **overrides)
    save_weights(result.net, out)
    write_curves_csv(result.curves, out.with_suffix(".csv"))
    report = {"stage": kind, "seed": args.seed, "config": config.to_dict(),
              "settings": settings_dict({kind: settings})[kind], "loss_overrides": overrides,
              "ohem": not args.no_ohem, "landmark_task": not args.no_landmark,
              "checksum": result.net.checksum(),
              "final_val": {row[2]: row[3] for row in result.curves if row[1] == "val"}}
    dump_json(report, out.with_suffix(".json"))
    return result, report


def cmd_train(args) -> dict:
    config, loss = load_flat_config(args.config)
    train = load_corpus(args.corpus, "train")
    val = _corpus_split(args.corpus, "val")
    out = Path(args.out)
    if args.stage == "all":
        out.mkdir(parents=True, exist_ok=True)
        nets, reports = {}, {}
        for kind in KINDS:
            result, reports[kind] = _train_one_stage(kind, args, train, val, nets, config, loss,
                                                     out / f"{kind}.bin")
            nets[kind] = result.net
        return {"weights_dir": str(out), "checksums": {k: r["checksum"] for k, r in reports.items()}}
    prefix_dir = Path(args.prefix_dir) if args.prefix_dir else out.parent
    prefix = {}
    for kind in KINDS[:KINDS.index(args.stage)]:
        path = prefix_dir / f"{kind}.bin"
        if not path.is_file():
            raise FileNotFoundError(f"{args.stage} needs the trained {kind} at {path}")
        prefix[kind] = load_weights(path)
        prefix[kind].trained = True
    out.parent.mkdir(parents=True, exist_ok=True)
    _, report = _train_one_stage(args.stage, args, train, val, prefix, config, loss, out)
    return {"weights": str(out), "checksum": report["checksum"]}


def cmd_detect(args) -> dict:
    config, _ = load_flat_config(args.config)
    if args.min_face is not None:
        config = CascadeConfig.from_dict({**config.to_dict(), "min_face": args.min_face})
    nets = load_cascade(args.weights_dir)
    image = load_image(args.image)
    dets = detect(image, nets, config)
    result = {"image": str(args.image), "config": config.to_dict(),
              "checksums": {k: n.checksum() for k, n in nets.items()},
              "detections": detections_to_json(dets)}
    dump_json(result, args.out_json)
    if args.out_image:
        save_image(args.out_image, draw_detections(image, dets))
    return {"detections": len(dets), "out_json": str(args.out_json)}


def cmd_eval(args) -> dict:
    config, _ = load_flat_config(args.config)
    nets = load_cascade(args.weights_dir)
    corpus = load_corpus(args.corpus, args.split)
    if not corpus:
        raise ValueError(f"split {args.split!r} of {args.corpus} is empty")
    report = evaluate_corpus(nets, corpus, config, fallback=args.fallback)
    manifest = json.loads((Path(args.corpus) / "manifest.json").read_text())
    report.update({"config": config.to_dict(), "seed": args.seed, "split": args.split,
                   "corpus_meta": manifest.get("meta", {}),
                   "checksums": {k: n.checksum() for k, n in nets.items()}})
    if args.bench_n:
        report["timing"] = timing_table(nets, args.bench_n)
    dump_json(report, args.report)
    return {"report": str(args.report), "average_precision": report["average_precision"],
            "precision_at_recall_0.9": report["precision_at_recall_0.9"],
            "nme": report["nme"]["mean"]}


def cmd_bench(args) -> dict:
    if args.weights_dir:
        nets = load_cascade(args.weights_dir)
    else:
        nets = {k: build_network(k, seed=args.seed) for k in KINDS}
    table = timing_table(nets, args.n)
    sec = table["seconds"]
    table["ordering_holds"] = sec["pnet"] < sec["rnet"] < sec["onet"]
    if args.report:
        dump_json(table, args.report)
    return table


def cmd_ablate(args) -> dict:
    train = load_corpus(args.corpus, "train")
    val = _corpus_split(args.corpus, "val")
    if not val:
        raise ValueError(f"{args.corpus} has no val split")
    kwargs = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr),
                                ("batches_per_epoch", args.batches_per_epoch)) if v is not None}
    res = run_ablation(args.which, train, val, seed=args.seed, **kwargs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, run in res.runs.items():
        write_curves_csv(run.curves, out / f"{args.which}_{name}.csv")
    summary = {**res.summary(), "seed": args.seed, "settings": kwargs,
               "n_train_images": len(train), "n_val_images": len(val)}
    dump_json(summary, out / f"{args.which}_summary.json")
    return summary


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cascadeface", description="Three-stage cascaded face detector (numpy).")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a toy face corpus")
    s.add_argument("--n", type=int, required=True, help="number of images")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="corpus directory (PPM images, annotations.jsonl, manifest.json)")
    s.add_argument("--size", type=int, default=128, help="image side in pixels")
    s.add_argument("--val", type=float, default=0.1, help="validation fraction")
    s.add_argument("--test", type=float, default=0.1, help="test fraction")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one stage, or all three with --stage all")
    t.add_argument("--stage", choices=KINDS + ("all",), required=True)
    t.add_argument("--corpus", required=True, help="corpus directory written by synth")
    t.add_argument("--out", required=True, help="weights file, or a directory for --stage all")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-ohem", action="store_true", help="use every sample in the detection loss")
    t.add_argument("--no-landmark", action="store_true", help="zero the landmark loss weight")
    t.add_argument("--epochs", type=int, help="override the per-stage default")
    t.add_argument("--lr", type=float, help="override the per-stage default")
    t.add_argument("--batches-per-epoch", type=int, help="cap batches per epoch")
    t.add_argument("--prefix-dir", help="where earlier stages' weights live (default: next to --out)")
    t.add_argument("--config", help="flat JSON of cascade thresholds and loss weights")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run the cascade on one PPM image")
    d.add_argument("--weights-dir", required=True, help="directory with pnet.bin, rnet.bin, onet.bin")
    d.add_argument("--image", required=True, help="binary PPM (P6) image")
    d.add_argument("--min-face", type=float, help="smallest face side to search for, in pixels")
    d.add_argument("--config", help="flat JSON of cascade thresholds")
    d.add_argument("--out-json", required=True, help="detections as JSON")
    d.add_argument("--out-image", help="PPM copy with boxes and landmarks drawn")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="PR table and landmark NME on a corpus split")
    e.add_argument("--weights-dir", required=True, help="directory with pnet.bin, rnet.bin, onet.bin")
    e.add_argument("--corpus", required=True, help="corpus directory written by synth")
    e.add_argument("--report", required=True, help="JSON report path")
    e.add_argument("--split", default="test", help="train, val or test")
    e.add_argument("--config", help="flat JSON of cascade thresholds")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--bench-n", type=int, default=300, help="forwards per timing run; 0 skips timing")
    e.add_argument("--fallback", action="store_true", help="score missed faces from a central crop")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time 300 single-patch forwards per network")
    b.add_argument("--weights-dir", help="trained weights (default: fresh networks)")
    b.add_argument("--n", type=int, default=300, help="forwards per timing run")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--report", help="JSON report path (default: stdout only)")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="OHEM or joint-landmark ablation on O-Net")
    a.add_argument("--which", choices=("ohem", "joint"), required=True)
    a.add_argument("--corpus", required=True, help="corpus directory written by synth")
    a.add_argument("--out", required=True, help="directory for curves and the summary")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--epochs", type=int, help="epochs per run")
    a.add_argument("--lr", type=float)
    a.add_argument("--batches-per-epoch", type=int, help="cap batches per epoch")
    a.set_defaults(func=cmd_ablate)
    return p


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    for name in ("n", "bench_n", "epochs", "batches_per_epoch"):
        value = getattr(args, name, None)
        if value is not None and value < (0 if name == "bench_n" else 1):
            print(f"error: usage: --{name.replace('_', '-')} must be positive, got {value}",
                  file=sys.stderr)
            return 2
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    sys.stdout.write(dump_json(result))
    return 0
