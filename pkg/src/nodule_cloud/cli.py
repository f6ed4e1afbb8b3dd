"""Command-line front end.

    nodule-cloud gen --out DATA --scans 12 --seed 7
    nodule-cloud dataset --data DATA --folds 4
    nodule-cloud sample --manifest DATA/fpr_train.jsonl --out CLOUDS/train
    nodule-cloud train --clouds CLOUDS/train --out model.nwts
    nodule-cloud eval --weights model.nwts --clouds CLOUDS/test --data DATA --out REPORT
    nodule-cloud froc --labeled REPORT/labeled.csv --scans 3
    nodule-cloud export-ply CLOUDS/test --out PLY
    nodule-cloud bench --out BENCH

Failures print a JSON object ``{"error": ..., "message": ...}`` on stderr and
exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import augment_volume
from .cloud import candidate_cloud, make_candidate, read_cloud, write_cloud
from .config import PipelineConfig, load_config
from .errors import MalformedCloudFile, NoduleCloudError
from .evaluation import (
    FP_LEVELS, ScoredCandidate, Truth, count_truths, froc, labeled_to_csv, match_candidates,
    read_labeled_csv,
)
from .fileutil import atomic_write_text, dump_json, dump_jsonl, load_jsonl
from .model import FeatureSet, load_weights, log_to_csv, predict, save_weights, train
from .phantom import build_fpr_dataset, config_dict, truth_from_dict, truth_to_dict
from .pipeline import BenchConfig, make_scan, run_benchmark, scan_id, summarize
from .plotting import plot_cloud, plot_froc, plot_training
from .ply import write_ply
from .sampling import candidate_rng, resample
from .volume import read_mask, read_volume, write_mask, write_volume

log = logging.getLogger("nodule_cloud")

FEATURE_CHOICES = [fs.value for fs in FeatureSet]


def _rel(path, start) -> str:
    return os.path.relpath(path, start).replace(os.sep, "/")


def _resolve(rows, base):
    """Turn manifest-relative path fields into absolute paths."""
    base = Path(base)
    out = []
    for r in rows:
        r = dict(r)
        for key in ("volume_path", "mask_path", "truth_path", "cloud_path"):
            if r.get(key):
                r[key] = str((base / r[key]).resolve())
        out.append(r)
    return out


def _relativize(rows, base):
    out = []
    for r in rows:
        r = dict(r)
        for key in ("volume_path", "mask_path", "truth_path", "cloud_path"):
            if r.get(key):
                r[key] = _rel(r[key], base)
        out.append(r)
    return out


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _load_truths(path) -> list:
    with open(path) as fh:
        return [truth_from_dict(d) for d in json.load(fh)["truths"]]


# -- gen -----------------------------------------------------------------------


def _gen_one(job):
    index, out, cfg = job
    scan = make_scan(index, cfg.seed, cfg.phantom(), cfg.detector(), cfg.target_mm)
    sdir = Path(out) / scan.scan_id
    write_volume(sdir / "volume.nvol", scan.volume)
    dump_json(sdir / "truth.json", {"scan_id": scan.scan_id, "truths": [truth_to_dict(t) for t in scan.nodules]})
    rows = []
    for c in scan.candidates:
        mpath = sdir / "masks" / f"{c['candidate_id']}.nvol"
        write_mask(mpath, c["mask"], scan.volume.spacing)
        rows.append({
            "candidate_id": c["candidate_id"], "scan_id": scan.scan_id, "p": c["p"],
            "center_mm": c["center_mm"], "r_mm": c["r_mm"], "source": c["source"],
            "mask_path": _rel(mpath, out), "volume_path": _rel(sdir / "volume.nvol", out),
            "truth_path": _rel(sdir / "truth.json", out),
        })
    dump_jsonl(sdir / "candidates.jsonl", _relativize(_resolve(rows, out), sdir))
    return {"scan_id": scan.scan_id, "volume": _rel(sdir / "volume.nvol", out),
            "truth": _rel(sdir / "truth.json", out), "candidates": _rel(sdir / "candidates.jsonl", out),
            "n_candidates": len(rows), "n_truths": len(scan.nodules)}


def cmd_gen(args, cfg: PipelineConfig):
    out = Path(args.out)
    n = args.scans if args.scans is not None else cfg.scans
    entries = _map(_gen_one, [(i, str(out), cfg) for i in range(n)], cfg.jobs)
    dump_json(out / "manifest.json", {
        "seed": cfg.seed, "target_mm": cfg.target_mm, "phantom": config_dict(cfg.phantom()),
        "detector": config_dict(cfg.detector()), "scans": entries,
    })
    print(f"generated {n} scans, {sum(e['n_candidates'] for e in entries)} candidates in {out}")


# -- dataset -------------------------------------------------------------------


def cmd_dataset(args, cfg: PipelineConfig):
    data = Path(args.data)
    with open(data / "manifest.json") as fh:
        manifest = json.load(fh)
    entries = {e["scan_id"]: e for e in manifest["scans"]}

    def infer(sid, trained_on):
        # the stand-in detector's output does not depend on its training scans
        return _resolve(load_jsonl(data / entries[sid]["candidates"]), (data / entries[sid]["candidates"]).parent)

    def truths_of(sid):
        return [t.as_truth() for t in _load_truths(data / entries[sid]["truth"])]

    folds = args.folds if args.folds is not None else cfg.folds
    rng = np.random.default_rng([cfg.seed, 99])
    fpr_train, fpr_test, split = build_fpr_dataset(list(entries), infer, truths_of, folds, cfg.train_frac, rng)
    val_ids: list = []
    if cfg.val_frac > 0:
        n_val = max(1, int(round(cfg.val_frac * len(split["train"]))))
        val_ids = split["train"][-n_val:]
    fpr_val = [dict(r, split="val") for r in fpr_train if r["scan_id"] in val_ids]
    fpr_train = [r for r in fpr_train if r["scan_id"] not in val_ids]
    split["val"] = val_ids
    split["train"] = [s for s in split["train"] if s not in val_ids]
    split["truths"] = {sid: entries[sid]["truth"] for sid in entries}
    dump_jsonl(data / "fpr_train.jsonl", _relativize(fpr_train, data))
    dump_jsonl(data / "fpr_test.jsonl", _relativize(fpr_test, data))
    if val_ids:
        dump_jsonl(data / "fpr_val.jsonl", _relativize(fpr_val, data))
    dump_json(data / "split.json", split)
    pos = sum(r["label"] for r in fpr_train)
    print(f"FPR-train: {len(fpr_train)} candidates ({pos} positive) from {len(split['train'])} scans; "
          f"FPR-test: {len(fpr_test)} candidates from {len(split['test'])} scans")


# -- augment -------------------------------------------------------------------


def cmd_augment(args, cfg: PipelineConfig):
    manifest = Path(args.manifest)
    rows = _resolve(load_jsonl(manifest), manifest.parent)
    bad = [r["candidate_id"] for r in rows if r.get("split") != "train"]
    if bad:
        raise NoduleCloudError(f"augmentation applies to training rows only; {len(bad)} rows are not 'train'")
    out = Path(args.out)
    acfg = cfg.augment_config()
    by_scan: dict = {}
    for r in rows:
        by_scan.setdefault(r["scan_id"], []).append(r)
    new_rows = []
    for i, (sid, group) in enumerate(sorted(by_scan.items())):
        vol = read_volume(group[0]["volume_path"])
        for k in range(args.copies):
            rng = np.random.default_rng([acfg.seed, i, k])
            vpath = out / f"{sid}_aug{k}.nvol"
            write_volume(vpath, augment_volume(vol, acfg, rng))
            for r in group:
                new_rows.append(dict(r, candidate_id=f"{r['candidate_id']}_aug{k}", volume_path=str(vpath.resolve()),
                                     augmented=True))
    dump_jsonl(out / "manifest.jsonl", _relativize(new_rows, out))
    print(f"wrote {args.copies} augmented copies of {len(by_scan)} scans ({len(new_rows)} candidates)")


# -- sample --------------------------------------------------------------------


def _sample_group(job):
    rows, out, scfg, mode, padding = job
    vol = read_volume(rows[0][1]["volume_path"])
    done, failed = [], []
    for index, r in rows:
        try:
            mask = read_mask(r["mask_path"], vol.dims)
            c = make_candidate(mask, vol.spacing, r["p"], r["candidate_id"])
            full = candidate_cloud(vol, c, padding)
            cloud = resample(full, scfg, mode, candidate_rng(scfg.seed, index))
        except NoduleCloudError as exc:
            failed.append({"candidate_id": r["candidate_id"], "error": exc.code, "message": str(exc)})
            continue
        cpath = Path(out) / f"{r['candidate_id']}.npcd"
        write_cloud(cpath, cloud)
        side = dict(cloud.meta, candidate_id=r["candidate_id"], r_mm=c.r_mm, m=len(cloud),
                    mask_fraction=cloud.mask_count / len(cloud))
        dump_json(cpath.with_suffix(".json"), side)
        keep = {k: r.get(k) for k in ("candidate_id", "scan_id", "p", "label", "status", "truth_id", "split",
                                      "truth_path", "source")}
        keep.update(cloud_path=str(cpath.resolve()), center_mm=[float(x) for x in c.center_mm], r_mm=c.r_mm,
                    index=index)
        done.append(keep)
    return done, failed


def cmd_sample(args, cfg: PipelineConfig):
    manifest = Path(args.manifest)
    rows = _resolve(load_jsonl(manifest), manifest.parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scfg = cfg.sampler_config(m=args.m)
    groups: dict = {}
    for i, r in enumerate(rows):
        groups.setdefault(r["volume_path"], []).append((i, r))
    jobs = [(g, str(out), scfg, cfg.sampler, cfg.padding_mm) for g in groups.values()]
    results = _map(_sample_group, jobs, cfg.jobs)
    done = sorted((d for ds, _ in results for d in ds), key=lambda d: d["index"])
    failed = [f for _, fs in results for f in fs]
    dump_jsonl(out / "index.jsonl", _relativize(done, out))
    dump_json(out / "summary.json", {"sampler": cfg.sampler, "m": scfg.m, "seed": scfg.seed,
                                     "written": len(done), "failed": failed})
    print(f"sampled {len(done)} clouds ({cfg.sampler}, m={scfg.m}) into {out}")
    if failed:
        print(json.dumps({"failed": failed}), file=sys.stderr)
        if not done:
            return 1
    return 0


# -- train / eval --------------------------------------------------------------


def _load_clouds(dirs):
    rows, clouds = [], []
    for d in dirs:
        d = Path(d)
        for r in _resolve(load_jsonl(d / "index.jsonl"), d):
            clouds.append(read_cloud(r["cloud_path"], r["r_mm"], r["candidate_id"]).points)
            rows.append(r)
    if not clouds:
        raise NoduleCloudError(f"no clouds found in {', '.join(map(str, dirs))}")
    sizes = {len(c) for c in clouds}
    if len(sizes) != 1:
        raise MalformedCloudFile(f"clouds have differing sizes {sorted(sizes)}")
    return rows, np.stack(clouds)


def _split_truths(data, split_name):
    data = Path(data)
    with open(data / "split.json") as fh:
        split = json.load(fh)
    scans = split[split_name]
    truths = {sid: [t.as_truth() for t in _load_truths(data / split["truths"][sid])] for sid in scans}
    return scans, truths


def _score(rows, scores, scans, truths):
    scored = [ScoredCandidate(r["scan_id"], tuple(r["center_mm"]), float(s), r["candidate_id"])
              for r, s in zip(rows, scores)]
    match_candidates(scored, truths)
    return scored, froc(scored, len(scans), count_truths(truths))


def cmd_train(args, cfg: PipelineConfig):
    rows, clouds = _load_clouds(args.clouds)
    over = {"epochs": args.epochs, "batch_size": args.batch_size, "lr0": args.lr,
            "use_edgeconv": args.edgeconv, "k_neighbors": args.k}
    tcfg = cfg.train_config(**over)
    val = None
    if args.val_clouds:
        vrows, vclouds = _load_clouds(args.val_clouds)
        scans, truths = _split_truths(args.data, args.val_split)
        val = (vclouds, lambda probs: _score(vrows, probs, scans, truths)[1].mean_sens)
    labels = np.array([int(r["label"]) for r in rows])
    res = train(clouds, labels, tcfg, np.random.default_rng(tcfg.seed), val=val)
    save_weights(args.out, res.weights)
    log_path = args.log or str(args.out) + ".log.csv"
    atomic_write_text(log_path, log_to_csv(res.log))
    last = res.log[-1]
    print(f"trained {tcfg.epochs} epochs on {len(rows)} clouds ({tcfg.feature_set.value}); "
          f"final loss {last['train_loss']:.4f}; weights -> {args.out}")


def _table_header() -> str:
    return " ".join(f"{lv:g}" for lv in FP_LEVELS) + " | mean"


def cmd_eval(args, cfg: PipelineConfig):
    w = load_weights(args.weights)
    fs = FeatureSet(cfg.features)
    if w.config.input_dim != fs.input_dim:
        raise NoduleCloudError(f"weights expect {w.config.input_dim} features, {fs.value} has {fs.input_dim}")
    rows, clouds = _load_clouds(args.clouds)
    scans, truths = _split_truths(args.data, args.split)
    scores = predict(clouds, w, fs)
    scored, rep = _score(rows, scores, scans, truths)
    out = Path(args.out)
    atomic_write_text(out / "labeled.csv", labeled_to_csv(scored))
    atomic_write_text(out / "froc.json", rep.to_json())
    atomic_write_text(out / "froc.csv", rep.to_csv())
    plot_froc({fs.value: rep}, out / "froc.png", title=f"FROC ({args.split})")
    print(_table_header())
    print(rep.row())


def cmd_froc(args, cfg: PipelineConfig):
    labeled = read_labeled_csv(args.labeled)
    rep = froc(labeled, args.scans, args.truths)
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / "froc.json", rep.to_json())
        atomic_write_text(out / "froc.csv", rep.to_csv())
        plot_froc({Path(args.labeled).stem: rep}, out / "froc.png")
    print(_table_header())
    print(rep.row())


def cmd_export_ply(args, cfg: PipelineConfig):
    files = []
    for p in map(Path, args.clouds):
        files.extend(sorted(p.glob("*.npcd")) if p.is_dir() else [p])
    out = Path(args.out)
    for f in files:
        cloud = read_cloud(f, ref=f.stem)
        write_ply(out / f"{f.stem}.ply", cloud)
        if args.png:
            plot_cloud(cloud, out / f"{f.stem}.png", title=f.stem)
    print(f"exported {len(files)} clouds to {out}")


def cmd_bench(args, cfg: PipelineConfig):
    tcfg = cfg.train_config(epochs=args.epochs)
    bcfg = BenchConfig(
        n_scans=args.scans, seed=cfg.seed, folds=cfg.folds,
        train_frac=cfg.train_frac, phantom=cfg.phantom(), detector=cfg.detector(),
        sampler=cfg.sampler_config(m=args.m), train=tcfg, repeats=args.repeats,
    )
    res = run_benchmark(bcfg)
    out = Path(args.out)
    summary = summarize(res)
    rows = []
    for key, reps in res.reports.items():
        sens = np.mean([[r.sens_at[lv] for lv in FP_LEVELS] for r in reps], axis=0)
        rows.append([key, *[f"{s:.3f}" for s in sens], f"{summary[key]:.3f}"])
    lines = ["run," + ",".join(f"{lv:g}" for lv in FP_LEVELS) + ",mean"] + [",".join(r) for r in rows]
    atomic_write_text(out / "bench.csv", "\n".join(lines) + "\n")
    dump_json(out / "bench.json", {
        "n_scans": bcfg.n_scans, "n_candidates": res.n_candidates, "n_train": res.n_train, "n_test": res.n_test,
        "mean_sens": summary, "reports": {k: [r.to_dict() for r in v] for k, v in res.reports.items()},
    })
    plot_froc({k: v[0] for k, v in res.reports.items()}, out / "froc.png", title="sampling and feature ablation")
    plot_training({k: v[0] for k, v in res.logs.items()}, out / "training.png")
    width = max(len(r[0]) for r in rows)
    print(f"{'run':<{width}}  " + _table_header())
    for r in rows:
        print(f"{r[0]:<{width}}  " + " ".join(r[1:-1]) + " | " + r[-1])


# -- argument parsing ----------------------------------------------------------


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags without defaults so a flag given
    # before the subcommand name is not overwritten by the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="TOML config file")
    g.add_argument("--seed", type=int, help="master seed (default 0)")
    g.add_argument("--jobs", type=int, help="worker processes")
    g.add_argument("--augment", action=argparse.BooleanOptionalAction,
                   help="point-level training augmentation")
    g.add_argument("--sampler", choices=["rbf", "uniform"], help="fixed-size sampler")
    g.add_argument("--features", choices=FEATURE_CHOICES, help="per-point input features")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(suppress=True)
    parser = argparse.ArgumentParser(prog="nodule-cloud", description=__doc__.split("\n")[0],
                                     parents=[_global_options(suppress=False)])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate phantom scans and detector candidates")
    p.add_argument("--out", required=True)
    p.add_argument("--scans", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("dataset", parents=[common], help="build FPR train/test manifests")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("augment", parents=[common], help="write image-level augmented copies of training scans")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--copies", type=int, default=1)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("sample", parents=[common], help="extract and resample candidate point clouds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, help="points per cloud")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", parents=[common], help="train the point-set classifier")
    p.add_argument("--clouds", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--edgeconv", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--k", type=int)
    p.add_argument("--val-clouds", nargs="+")
    p.add_argument("--data", help="dataset directory holding split.json (for validation)")
    p.add_argument("--val-split", default="val")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score clouds and write a FROC report")
    p.add_argument("--weights", required=True)
    p.add_argument("--clouds", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("froc", parents=[common], help="FROC table row from a labeled-candidate CSV")
    p.add_argument("--labeled", required=True)
    p.add_argument("--scans", type=int, required=True)
    p.add_argument("--truths", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_froc)

    p = sub.add_parser("export-ply", parents=[common], help="export clouds as colored ASCII PLY")
    p.add_argument("clouds", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true", help="also render projection plots")
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("bench", parents=[common], help="sampling and feature ablation on phantoms")
    p.add_argument("--out", required=True)
    p.add_argument("--scans", type=int, default=BenchConfig.n_scans)
    p.add_argument("--epochs", type=int, default=BenchConfig.train.epochs)
    p.add_argument("--repeats", type=int, default=BenchConfig.repeats)
    p.add_argument("--m", type=int, default=BenchConfig.sampler.m)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        over = {k: getattr(args, k) for k in ("seed", "jobs", "augment", "sampler", "features")
                if getattr(args, k) is not None}
        if over:
            cfg = replace(cfg, **over)
        rc = args.func(args, cfg)
    except (NoduleCloudError, OSError, ValueError, KeyError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(json.dumps({"error": code, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
