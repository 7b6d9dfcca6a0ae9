"""Command-line pipeline: simulate -> preprocess -> featurize -> train -> ablate / transfer / export.

Every command writes into ``--out`` and leaves a ``manifest.json`` that lists
its configuration, seeds and the checksum of every produced file.  ``replay``
re-runs a command from its manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

from . import __version__, dsp, features, layers, sim
from .errors import ConfigError, DasError, FormatError
from .evaluation import (export_attention, parse_groups, run_ablation, transfer_eval, write_confusion_csv,
                         write_report, write_summary)
from .metrics import macro_f1, metrics
from .train import SearchSpace, TrainConfig, evaluate, kfold, train_model

log = logging.getLogger("dastraffic")

SEED_STREAMS = ("sim", "folds", "init", "dropout", "search")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, argv, config: dict, seed: int, inputs=()) -> Path:
    out = Path(out)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "tool": "dastraffic",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "seed_streams": list(SEED_STREAMS),
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p.relative_to(out)): sha256(p) for p in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _band(text):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("band must look like LO:HI") from None
    return lo, hi


def _range(kind):
    def parse(text):
        try:
            lo, hi = (kind(v) for v in text.split(":"))
        except ValueError:
            raise argparse.ArgumentTypeError("range must look like LO:HI") from None
        return lo, hi
    return parse


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {what}: {path}")
    return path


def _load_segments(directory: Path):
    seg_dir = _need(Path(directory) / "segments", "segments directory")
    paths = sorted(seg_dir.glob("*.fseq"))
    if not paths:
        raise ConfigError(f"no .fseq files in {seg_dir}")
    return [features.read_fseq(p) for p in paths], paths


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_simulate(args, argv):
    overrides = {"allow_overlap": args.allow_overlap}
    if args.background_sigma is not None:
        overrides["background_sigma"] = args.background_sigma
    site = sim.get_site(args.site, **overrides)
    duration = args.hours * 3600.0 if args.seconds is None else args.seconds
    out = _out(args)
    sm, events = sim.generate_scene(site, duration, args.seed)
    sim.write_dasb(out / "scene.dasb", sm)
    sim.write_annotations(out / "annotations.jsonl", events)
    scene = {"site": site.to_dict(), "seed": args.seed, "duration_s": duration}
    (out / "scene.json").write_text(json.dumps(scene, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "simulate", argv, scene, args.seed)
    log.info("simulated %s: %d SPs x %d samples, %d events", site.name, *sm.shape, len(events))


def cmd_preprocess(args, argv):
    src = Path(args.input)
    sm = sim.read_dasb(_need(src / "scene.dasb", "scene.dasb"))
    ann = _need(src / "annotations.jsonl", "annotations.jsonl")
    out = _out(args)
    lo, hi = args.band
    data = dsp.preprocess(sm.data, sm.fs, lo, hi)
    sim.write_dasb(out / "scene.dasb", sim.StrainMatrix(data, sm.fs))
    shutil.copyfile(ann, out / "annotations.jsonl")
    if (src / "scene.json").exists():
        shutil.copyfile(src / "scene.json", out / "scene.json")
    write_manifest(out, "preprocess", argv, {"band": [lo, hi]}, args.seed, [src / "scene.dasb", ann])


def cmd_featurize(args, argv):
    src = Path(args.input)
    sm = sim.read_dasb(_need(src / "scene.dasb", "scene.dasb"))
    events = sim.read_annotations(_need(src / "annotations.jsonl", "annotations.jsonl"))
    grid = dsp.WindowGrid(args.win, args.shift, sm.fs)
    num_sps = sm.shape[0]
    if args.targets == "all":
        targets = list(range(1, num_sps - 1)) if args.spatial and num_sps >= 3 else list(range(num_sps))
    else:
        targets = [int(v) - 1 for v in args.targets.split(",")]
    seqs = features.featurize_scene(sm.data, events, grid, deltas=args.deltas, spatial=args.spatial,
                                    targets=targets, segment_s=args.segment_s)
    out = _out(args)
    seg_dir = out / "segments"
    seg_dir.mkdir(exist_ok=True)
    for seq in seqs:
        features.write_fseq(seg_dir / f"{seq.segment_id}.fseq", seq)
    if args.csv:
        features.write_feature_csv(out / "features.csv", seqs)
    config = {"win_s": args.win, "shift_s": args.shift, "deltas": args.deltas, "spatial": args.spatial,
              "targets": targets, "segment_s": args.segment_s, "num_sps": num_sps, "D": seqs[0].D}
    write_manifest(out, "featurize", argv, config, args.seed, [src / "scene.dasb", src / "annotations.jsonl"])
    log.info("wrote %d segments (T=%d, D=%d)", len(seqs), seqs[0].T, seqs[0].D)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, layers=args.layers, hidden=args.hidden, dropout=args.dropout, l2=args.l2,
                       epochs_max=args.epochs, patience=args.patience, batch_segments=args.batch,
                       seed=args.seed, d_k=args.d_k)


def cmd_train(args, argv):
    segs, paths = _load_segments(Path(args.input))
    cfg = _train_config(args)
    by_id = {s.segment_id: s for s in segs}
    plan = kfold(sorted(by_id), args.folds, args.seed)
    tr, va = plan.split(args.fold)
    spec = layers.ModelSpec(args.arch, segs[0].D, hidden=cfg.hidden, layers=cfg.layers,
                            dropout=cfg.dropout, d_k=cfg.d_k, residual=args.residual)
    model, history = train_model(spec, [by_id[s] for s in tr], [by_id[s] for s in va], cfg)
    out = _out(args)
    layers.save_model(out / "model.mdl", model)
    with (out / "history.csv").open("w") as fh:
        fh.write("epoch,train_loss,val_loss,val_acc\n")
        for h in history:
            fh.write(f"{h['epoch']},{h['train_loss']:.10f},{h['val_loss']:.10f},{h['val_acc']:.10f}\n")
    _, cm = evaluate(model, [by_id[s] for s in va])
    acc, f1 = metrics(cm)
    write_confusion_csv(out / "confusion.csv", cm)
    result = {"arch": args.arch, "acc": acc, "f1": f1, "macro_f1": macro_f1(cm),
              "params": layers.count_params(model), "best_epoch": model.best_epoch,
              "train_ids": tr, "val_ids": va, "confusion": cm.tolist()}
    (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "train", argv, {"train": cfg.to_dict(), "spec": spec.to_dict(), "fold": args.fold,
                                        "folds": args.folds}, args.seed, paths)
    log.info("%s: acc %.2f%% f1 %.2f%% (%d params)", args.arch, acc, f1, result["params"])


def cmd_ablate(args, argv):
    segs, paths = _load_segments(Path(args.input))
    archs = list(layers.ARCHS) if args.archs == "all" else args.archs.split(",")
    base = TrainConfig(epochs_max=args.epochs, patience=args.patience, batch_segments=args.batch, seed=args.seed)
    space = SearchSpace(hidden=args.space_hidden, layers=args.space_layers)
    out = _out(args)
    trial_dir = out / "trials"
    trial_dir.mkdir(exist_ok=True)
    rows = run_ablation(segs, archs, trials=args.trials, seed=args.seed, folds=args.folds,
                        space=space, base=base, ledger_dir=trial_dir)
    write_report(out / "report.csv", rows)
    write_summary(out / "summary.json", rows, {"seed": args.seed, "trials": args.trials, "folds": args.folds})
    write_manifest(out, "ablate", argv, {"archs": archs, "trials": args.trials, "folds": args.folds,
                                         "space": {"hidden": list(space.hidden), "layers": list(space.layers),
                                                   "lr": list(space.lr), "dropout": list(space.dropout),
                                                   "l2": list(space.l2)},
                                         "base": base.to_dict()}, args.seed, paths)


def cmd_transfer(args, argv):
    model = layers.load_model(_need(Path(args.model), "model"))
    target, tpaths = _load_segments(Path(args.target))
    groups = parse_groups(args.groups)
    source = None
    inputs = [Path(args.model), *tpaths]
    if args.source:
        source, spaths = _load_segments(Path(args.source))
        inputs += spaths
        if args.split:
            keep = set(json.loads(Path(args.split).read_text())["val_ids"])
            source = [s for s in source if s.segment_id in keep]
    num_sps = json.loads((Path(args.target) / "manifest.json").read_text())["config"].get("num_sps") \
        if (Path(args.target) / "manifest.json").exists() else None
    results = transfer_eval(model, target, groups, source, num_sps)
    out = _out(args)
    summary = {}
    for name, (cm, acc) in results.items():
        write_confusion_csv(out / f"confusion_{name}.csv", cm)
        summary[name] = {"acc": acc, "confusion": cm.tolist()}
    if "source" in results:
        src_acc = results["source"][1]
        for name in groups:
            summary[name]["drop_pp"] = src_acc - summary[name]["acc"]
    (out / "transfer.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "transfer", argv, {"groups": {k: list(v) for k, v in groups.items()}}, args.seed, inputs)


def cmd_export(args, argv):
    model = layers.load_model(_need(Path(args.model), "model"))
    segs, _ = _load_segments(Path(args.input))
    chosen = [s for s in segs if s.segment_id == args.segment] if args.segment else segs[:1]
    if not chosen:
        raise ConfigError(f"segment {args.segment!r} not found")
    out = _out(args)
    for seq in chosen:
        export_attention(model, seq, out, png=args.png)
    write_manifest(out, "export", argv, {"segment": chosen[0].segment_id}, args.seed, [Path(args.model)])


def cmd_replay(args, argv):
    manifest = json.loads(_need(Path(args.manifest), "manifest").read_text())
    if manifest.get("tool") != "dastraffic":
        raise FormatError(f"{args.manifest}: not a dastraffic manifest")
    old = list(manifest["argv"])
    if args.out:
        i = old.index("--out")
        old[i + 1] = args.out
    return main(old)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dastraffic", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=0)
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        return sp

    s = common(sub.add_parser("simulate", help="generate a synthetic scene"))
    s.add_argument("--site", default="palacio", choices=sorted(sim.SITES))
    s.add_argument("--hours", type=float, default=1.0)
    s.add_argument("--seconds", type=float, default=None, help="overrides --hours")
    s.add_argument("--allow-overlap", action="store_true")
    s.add_argument("--background-sigma", type=float, default=None)
    s.set_defaults(func=cmd_simulate)

    s = common(sub.add_parser("preprocess", help="detrend and band-pass a scene"))
    s.add_argument("--input", required=True)
    s.add_argument("--band", type=_band, default=(0.1, 30.0))
    s.set_defaults(func=cmd_preprocess)

    s = common(sub.add_parser("featurize", help="window features and packed segments"))
    s.add_argument("--input", required=True)
    s.add_argument("--win", type=float, default=2.0)
    s.add_argument("--shift", type=float, default=0.5)
    s.add_argument("--deltas", action="store_true")
    s.add_argument("--spatial", action="store_true")
    s.add_argument("--segment-s", type=float, default=90.0)
    s.add_argument("--targets", default="all", help="'all' or comma-separated 1-based SP numbers")
    s.add_argument("--csv", action="store_true", help="also write features.csv")
    s.set_defaults(func=cmd_featurize)

    def training(sp):
        sp.add_argument("--epochs", type=int, default=200)
        sp.add_argument("--patience", type=int, default=10)
        sp.add_argument("--batch", type=int, default=16)
        sp.add_argument("--folds", type=int, default=5)
        return sp

    s = training(common(sub.add_parser("train", help="train one architecture")))
    s.add_argument("--input", required=True)
    s.add_argument("--arch", default="bi", choices=layers.ARCHS)
    s.add_argument("--hidden", type=int, default=128)
    s.add_argument("--layers", type=int, default=1)
    s.add_argument("--lr", type=float, default=5e-5)
    s.add_argument("--dropout", type=float, default=0.1)
    s.add_argument("--l2", type=float, default=1e-5)
    s.add_argument("--d-k", type=int, default=None)
    s.add_argument("--residual", action="store_true")
    s.add_argument("--fold", type=int, default=0, help="which fold is held out")
    s.set_defaults(func=cmd_train)

    s = training(common(sub.add_parser("ablate", help="hyperparameter search + CV over architectures")))
    s.add_argument("--input", required=True)
    s.add_argument("--archs", default="all")
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--space-hidden", type=_range(int), default=(64, 256))
    s.add_argument("--space-layers", type=_range(int), default=(1, 3))
    s.set_defaults(func=cmd_ablate)

    s = common(sub.add_parser("transfer", help="evaluate a model on SP groups of another site"))
    s.add_argument("--model", required=True)
    s.add_argument("--target", required=True, help="featurize output of the target site")
    s.add_argument("--source", default=None, help="featurize output of the source site")
    s.add_argument("--split", default=None, help="train metrics.json whose val_ids select the source test set")
    s.add_argument("--groups", default="A:1-3,B:3-5,C:5-7")
    s.set_defaults(func=cmd_transfer)

    s = common(sub.add_parser("export", help="attention heatmap CSVs for one segment"))
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--segment", default=None)
    s.add_argument("--png", action="store_true")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("replay", help="re-run a command from its manifest")
    s.add_argument("manifest")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_replay, seed=0)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = args.func(args, argv)
        return int(rc or 0)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
