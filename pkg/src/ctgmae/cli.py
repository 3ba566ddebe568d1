"""Command-line entry point: ``ctgmae <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
Every command that draws random numbers takes ``--seed``; the stage's
generator is seeded with ``SeedSequence([seed, stage_salt])`` so the same
seed gives different but reproducible streams per stage.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .data import (SPLIT_NAMES, ParseError, SplitAssignment, acidemia_label, load_metadata,
                   load_recording, proportional_sizes, save_metadata, stratified_split,
                   write_recording)
from .inference import (DEFAULT_STRIDE, classify_recording, emit_trace, extract_alerts,
                        largest_segment, sliding_predict)
from .metrics import evaluate_subgroups
from .model import ModelConfig, WeightFileError, load_params, save_params
from .patchmask import patch_windows
from .preprocess import load_clean, preprocess_pipeline, write_clean_csv
from .synth import SynthConfig, generate_corpus
from .train import (FinetuneConfig, LogisticModel, PretrainConfig, augment_positive,
                    finetune, fit_logistic, pretrain, terminal_windows)

log = logging.getLogger("ctgmae")

STAGE_SALT = {"synth": 11, "split": 13, "pretrain": 17, "finetune": 19}
METADATA_FILE = "metadata.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def stage_seed(seed, stage):
    return int(np.random.SeedSequence([seed, STAGE_SALT[stage]]).generate_state(1)[0])


def merged(args, defaults: dict, keys):
    """Built-in defaults < ``--config`` JSON < explicit flags."""
    values = dict(defaults)
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
        unknown = set(cfg) - set(keys)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
        values.update(cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    return values


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


def _csvs(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    return sorted(directory.glob("*.csv"))


def load_dataset(data_dir, jobs=1, need_metadata=True):
    paths = _csvs(data_dir)
    if not paths:
        raise ValueError(f"no recording CSVs in {data_dir}")
    recs = _map(load_clean, paths, jobs)
    meta_path = Path(data_dir) / METADATA_FILE
    metas = load_metadata(meta_path) if (need_metadata or meta_path.exists()) else []
    return recs, metas


def _check_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _model_config(values, tiny):
    base = ModelConfig.tiny() if tiny else ModelConfig()
    keys = {f.name for f in fields(ModelConfig)} - {"head_type"}
    return replace(base, **{k: values[k] for k in keys if values.get(k) is not None})


def _write_manifest(path, payload):
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True, default=float))


# --- commands ---------------------------------------------------------------

def cmd_synth(args):
    v = merged(args, {"n": 10, "seed": 0, "duration_s": 1200.0, "healthy_fraction": 0.8},
               ["n", "seed", "duration_s", "healthy_fraction"])
    template = SynthConfig(duration_s=float(v["duration_s"]),
                           flat_uc=tuple(args.flat_uc) if args.flat_uc else None)
    corpus = generate_corpus(int(v["n"]), float(v["healthy_fraction"]), template,
                             stage_seed(int(v["seed"]), "synth"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for item in corpus:
        write_recording(item.raw, out / f"{item.id}.csv")
    save_metadata([item.meta for item in corpus], out / METADATA_FILE)
    log.info("wrote %d recordings to %s", len(corpus), out)


def cmd_preprocess(args):
    if args.recording:
        _check_file(args.recording, "recording")
        raw = load_recording(args.recording)
        write_clean_csv(raw, preprocess_pipeline(raw, args.jump_bpm), args.out)
        return
    if not (args.in_dir and args.out_dir):
        raise UsageError("preprocess needs --recording/--out or --in-dir/--out-dir")
    paths = _csvs(args.in_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(path):
        raw = load_recording(path)
        write_clean_csv(raw, preprocess_pipeline(raw, args.jump_bpm), out / path.name)

    _map(one, paths, args.jobs)
    meta = Path(args.in_dir) / METADATA_FILE
    if meta.exists():
        shutil.copyfile(meta, out / METADATA_FILE)


def cmd_dump_patches(args):
    _check_file(args.recording, "recording")
    rec = load_clean(args.recording)
    series = rec.fhr_norm if args.channel == "FHR" else rec.uc_norm
    window = series[args.start:args.start + args.context_len]
    if len(window) < args.context_len:
        raise ValueError(f"window at {args.start} runs past the end of the recording")
    patches = patch_windows(window, args.patch_len, args.patch_stride)
    fh = sys.stdout if args.out is None else open(args.out, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow(["patch", "start_sample"] + [f"x{i}" for i in range(args.patch_len)])
        for k, row in enumerate(patches):
            w.writerow([k, args.start + k * args.patch_stride] + [repr(float(x)) for x in row])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _parse_sizes(text):
    sizes = {}
    for part in text.split(","):
        try:
            name, n, p = part.split(":")
            sizes[name.strip()] = (int(n), int(p))
        except ValueError:
            raise UsageError(f"bad --sizes entry {part!r}; expected name:n:positives") from None
    unknown = set(sizes) - set(SPLIT_NAMES)
    if unknown:
        raise UsageError(f"unknown split names {sorted(unknown)}")
    return sizes


def cmd_split(args):
    _check_file(args.metadata, "metadata file")
    labels = [acidemia_label(m) for m in load_metadata(args.metadata) if m.ph is not None]
    if args.sizes:
        sizes = _parse_sizes(args.sizes)
    else:
        sizes = proportional_sizes(labels, tuple(float(x) for x in args.fractions.split(",")))
    split = stratified_split(labels, sizes, stage_seed(args.seed, "split"))
    split = SplitAssignment(split.assignment, args.seed)
    Path(args.out).write_text(split.to_json())
    for name in sizes:
        ids = set(split.ids(name))
        pos = sum(lab.positive for lab in labels if lab.id in ids)
        print(f"{name}\t{len(ids)}\t{pos}")


PRETRAIN_KEYS = ["epochs", "lr", "batch_size", "mask_ratio", "seed",
                 "d_model", "n_heads", "n_layers", "ff_dim", "dropout",
                 "patch_len", "stride", "context_len"]


def cmd_pretrain(args):
    v = merged(args, {"seed": 0, **asdict(PretrainConfig())}, PRETRAIN_KEYS)
    mcfg = _model_config(v, args.tiny)
    pcfg = PretrainConfig(mask_ratio=float(v["mask_ratio"]), lr=float(v["lr"]),
                          epochs=int(v["epochs"]), batch_size=int(v["batch_size"]),
                          seed=stage_seed(int(v["seed"]), "pretrain"))
    recs, _ = load_dataset(args.data_dir, args.jobs, need_metadata=False)
    params, history = pretrain(recs, mcfg, pcfg)
    save_params(params, args.out)
    _write_manifest(args.manifest or f"{args.out}.manifest.json", {
        "command": "pretrain", "seed": int(v["seed"]), "model_config": asdict(mcfg),
        "pretrain_config": asdict(pcfg), "loss_history": history, "weights": str(args.out),
        "n_recordings": len(recs)})


FINETUNE_KEYS = ["epochs", "lr", "weight_decay", "patience", "batch_size", "seed", "dropout"]


def _split_recordings(args, recs, metas):
    _check_file(args.split, "split file")
    split = SplitAssignment.from_json(Path(args.split).read_text())
    by_id = {r.id: r for r in recs}
    missing = [i for i in split.assignment if i not in by_id]
    if missing:
        raise ValueError(f"split names recordings not in {args.data_dir}: {missing[:5]}")
    labels = {m.id: acidemia_label(m).positive for m in metas if m.ph is not None}
    return split, by_id, labels


def cmd_finetune(args):
    v = merged(args, {"seed": 0, **asdict(FinetuneConfig())}, FINETUNE_KEYS)
    _check_file(args.backbone, "backbone weights")
    backbone = load_params(args.backbone)
    recs, metas = load_dataset(args.data_dir, args.jobs)
    split, by_id, labels = _split_recordings(args, recs, metas)
    L = backbone.config.context_len
    train = terminal_windows([by_id[i] for i in split.ids("train")], labels, L)
    val = terminal_windows([by_id[i] for i in split.ids("validation")], labels, L)
    if args.augment_dir:
        extra_recs, extra_meta = load_dataset(args.augment_dir, args.jobs)
        stage2 = {m.id: m.stage2_duration_s for m in extra_meta}
        train = augment_positive(train, [(r, stage2.get(r.id)) for r in extra_recs], L)
    fcfg = FinetuneConfig(lr=float(v["lr"]), weight_decay=float(v["weight_decay"]),
                          epochs=int(v["epochs"]), patience=int(v["patience"]),
                          batch_size=int(v["batch_size"]),
                          seed=stage_seed(int(v["seed"]), "finetune"))
    mcfg = replace(backbone.config, dropout=float(v["dropout"])) if v.get("dropout") is not None else None
    result = finetune(backbone, train, val, fcfg, mcfg)
    save_params(result.params, args.out)
    _write_manifest(args.manifest or f"{args.out}.manifest.json", {
        "command": "finetune", "seed": int(v["seed"]), "finetune_config": asdict(fcfg),
        "model_config": asdict(result.params.config), "backbone": str(args.backbone),
        "val_auc_history": result.val_auc, "loss_history": result.train_loss,
        "best_epoch": result.best_epoch, "weights": str(args.out),
        "n_train": len(train), "n_validation": len(val)})


def _classifier(path):
    _check_file(path, "weights")
    params = load_params(path)
    if params.config.head_type != "classification":
        raise ValueError(f"{path} holds a {params.config.head_type} model, need a classifier")
    return params


def _segment_features(params, rec, stride, threshold):
    seg = largest_segment(extract_alerts(sliding_predict(params, rec, stride), threshold))
    return [0.0, 0.0, 0.0, 0.0] if seg is None else seg.features()


def cmd_fit_alerts(args):
    params = _classifier(args.weights)
    recs, metas = load_dataset(args.data_dir, args.jobs)
    split, by_id, labels = _split_recordings(args, recs, metas)
    ids = [i for i in split.ids("train") if i in labels]
    feats = _map(lambda i: _segment_features(params, by_id[i], args.stride, args.threshold),
                 ids, args.jobs)
    model = fit_logistic(np.array(feats), np.array([labels[i] for i in ids]))
    Path(args.out).write_text(json.dumps({**model.to_dict(), "stride": args.stride,
                                          "threshold": args.threshold}, indent=1))


def cmd_infer(args):
    params = _classifier(args.weights)
    _check_file(args.recording, "recording")
    rec = load_clean(args.recording)
    trace = sliding_predict(params, rec, args.stride)
    segments = extract_alerts(trace, args.threshold)
    if args.out:
        emit_trace(trace, rec, segments, args.out, args.svg)
    summary = {"id": rec.id, "windows": len(range(0, len(rec) - trace.window_len + 1, args.stride)),
               "segments": [{"start": s.start, "end": s.end, "length": s.length, "max": s.max,
                             "cumsum": s.cumsum, "weighted_integral": s.weighted_integral}
                            for s in segments]}
    if args.alerts:
        _check_file(args.alerts, "alert model")
        summary["probability"] = classify_recording(
            segments, LogisticModel.from_dict(json.loads(Path(args.alerts).read_text())))
    print(json.dumps(summary, indent=1))


def cmd_evaluate(args):
    params = _classifier(args.weights)
    _check_file(args.alerts, "alert model")
    alerts = json.loads(Path(args.alerts).read_text())
    model = LogisticModel.from_dict(alerts)
    stride = args.stride or alerts.get("stride", DEFAULT_STRIDE)
    threshold = args.threshold or alerts.get("threshold", 0.5)
    recs, metas = load_dataset(args.data_dir, args.jobs)
    split, by_id, _ = _split_recordings(args, recs, metas)
    ids = set(split.ids(args.subset))
    subset_metas = [m for m in metas if m.id in ids]

    def score(i):
        return classify_recording(extract_alerts(sliding_predict(params, by_id[i], stride), threshold), model)

    scores = dict(zip([m.id for m in subset_metas], _map(score, [m.id for m in subset_metas], args.jobs)))
    report = evaluate_subgroups(scores, subset_metas)
    if args.out:
        Path(args.out).write_text(report.to_csv())
    sys.stdout.write(report.to_text())


# --- parser -------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="ctgmae", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=fn)
        return sp

    def jobs(sp):
        sp.add_argument("--jobs", type=int, default=1, help="parallel recording-level workers")

    sp = command("synth", cmd_synth, "write synthetic recordings and metadata.json")
    sp.add_argument("--n", type=int)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--duration-s", type=float)
    sp.add_argument("--healthy-fraction", type=float)
    sp.add_argument("--flat-uc", type=float, nargs=2, metavar=("START_S", "LENGTH_S"),
                    help="inject a flat UC stretch into every recording")
    sp.add_argument("--config")

    sp = command("preprocess", cmd_preprocess, "clean recordings and add normalized columns")
    sp.add_argument("--recording")
    sp.add_argument("--out")
    sp.add_argument("--in-dir")
    sp.add_argument("--out-dir")
    sp.add_argument("--jump-bpm", type=float, default=25.0)
    jobs(sp)

    sp = command("dump-patches", cmd_dump_patches, "print the patch matrix of one window as CSV")
    sp.add_argument("--recording", required=True)
    sp.add_argument("--channel", choices=("FHR", "UC"), default="FHR")
    sp.add_argument("--start", type=int, default=0)
    sp.add_argument("--context-len", type=int, default=1800)
    sp.add_argument("--patch-len", type=int, default=48)
    sp.add_argument("--patch-stride", type=int, default=24)
    sp.add_argument("--out")

    sp = command("split", cmd_split, "stratified train/validation/test split")
    sp.add_argument("--metadata", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sizes", help="e.g. train:441:90,validation:56:12,test:55:11")
    sp.add_argument("--fractions", default="0.8,0.1,0.1")

    sp = command("pretrain", cmd_pretrain, "masked FHR pretraining")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--config")
    sp.add_argument("--tiny", action="store_true", help="desk-scale model dimensions")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--mask-ratio", type=float)
    for name in ("d-model", "n-heads", "n-layers", "ff-dim", "patch-len", "stride", "context-len"):
        sp.add_argument(f"--{name}", type=int)
    sp.add_argument("--dropout", type=float)
    jobs(sp)

    sp = command("finetune", cmd_finetune, "fine-tune a classifier from a pretrained backbone")
    sp.add_argument("--backbone", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--config")
    sp.add_argument("--augment-dir", help="extra recordings; zero stage-2 duration become positives")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--weight-decay", type=float)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--dropout", type=float)
    jobs(sp)

    sp = command("fit-alerts", cmd_fit_alerts, "fit the alert logistic model on the train split")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    sp.add_argument("--threshold", type=float, default=0.5)
    jobs(sp)

    sp = command("infer", cmd_infer, "sliding-window risk trace and alerts for one recording")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--recording", required=True)
    sp.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--alerts", help="alert model JSON from fit-alerts")
    sp.add_argument("--out", help="trace CSV")
    sp.add_argument("--svg", help="optional SVG rendering of the trace")

    sp = command("evaluate", cmd_evaluate, "subgroup AUC/accuracy report")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--alerts", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--subset", choices=SPLIT_NAMES, default="test")
    sp.add_argument("--stride", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out", help="report CSV")
    jobs(sp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args.func(args)
    except UsageError as exc:
        print(f"ctgmae {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, ParseError, WeightFileError, FloatingPointError) as exc:
        print(f"ctgmae {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
