"""Command-line entry points.

Subcommands: train, extract, eval, rerank, ensemble, sweep, landscape.
Every command accepts --config (YAML), --profile {desk,paper}, --out, and
dotted overrides in the form --section.key=value (or via repeatable --set).
Each command writes a resolved configuration snapshot into its output
directory; re-running from that snapshot reproduces the outputs.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np
import yaml
from matplotlib.figure import Figure

from .config import RunConfig, _plain, load_data
from .evaluation import (DistanceMatrix, RerankParams, cosine_distance, evaluate,
                         evaluate_features, rerank)
from .features import (DimTag, FeatureMatrix, concat_ensemble, extract_all,
                       load_features, save_features)
from .landscape import (grid_to_csv, make_eval_bundle, near_center_area,
                        performance_surfaces, random_direction, save_heatmap)
from .model import EnsembleNet, init_model, load_checkpoint, num_part_vectors, save_checkpoint
from .training import train

_OVERRIDE_TOKEN = re.compile(r"--([A-Za-z_][\w.]*)=(.*)", re.DOTALL)


def _common_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--profile", choices=("desk", "paper"), default="desk",
                        help="base profile under --config and overrides (default desk)")
    parser.add_argument("--out", help="output directory (overrides out_dir)")
    parser.add_argument("--seed", type=int, default=None,
                        help="run seed (training init/shuffling, subset sampling)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. model.num_branches=4")


def _resolve_config(args, overrides: list[str]) -> RunConfig:
    base = RunConfig.desk_default() if args.profile == "desk" else RunConfig.paper_default()
    cfg = RunConfig.from_yaml(args.config, base=base) if args.config else base
    if args.seed is not None:
        overrides = [f"train.seed={args.seed}"] + overrides
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if args.out:
        cfg = cfg.replace_out_dir(args.out)
    return cfg


def _ranks_from_args(cfg: RunConfig, args) -> tuple[int, ...]:
    if getattr(args, "ranks", None):
        return tuple(int(r) for r in str(args.ranks).split(",") if r != "")
    return cfg.eval_ranks


def _rerank_from_args(cfg: RunConfig, args) -> RerankParams:
    params = cfg.rerank
    updates = {}
    if getattr(args, "k1", None) is not None:
        updates["k1"] = args.k1
    if getattr(args, "k2", None) is not None:
        updates["k2"] = args.k2
    if getattr(args, "lambda_value", None) is not None:
        updates["lambda_value"] = args.lambda_value
    if updates:
        params = RerankParams(**{**params.to_dict(), **updates})
    return params


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(cfg: RunConfig, command: str, arguments: dict, out: Path) -> None:
    doc = {"command": command, "arguments": _plain(arguments),
           "config": _plain(cfg.to_dict())}
    with open(out / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def _load_backbone_file(path) -> dict:
    with np.load(path) as archive:
        return {k: archive[k].copy() for k in archive.files if k != "__config__"}


def cmd_train(args, overrides: list[str]) -> int:
    cfg = _resolve_config(args, overrides)
    out = _prepare_out(cfg)
    dataset = load_data(cfg.data)
    model = EnsembleNet(cfg.model)
    weights = None
    if cfg.model.pretrained:
        if not cfg.pretrained_weights:
            raise ValueError("model.pretrained is set but pretrained_weights names no file")
        weights = _load_backbone_file(cfg.pretrained_weights)
    init_model(model, weights, seed=cfg.train.seed)
    _write_snapshot(cfg, "train", {}, out)
    model, log, checkpoints = train(model, dataset, cfg.train, cfg.augment, out_dir=out)
    log.to_csv(out / "trainlog.csv")
    print(f"trained {cfg.train.epochs} epochs on {len(dataset.train)} images, "
          f"{dataset.num_train_classes} classes, {model.num_parts} objectives")
    print(f"final loss {log.records[-1].total_loss:.6f}")
    for path in checkpoints:
        print(f"checkpoint {path}")
    print(f"training log {out / 'trainlog.csv'}")
    return 0


def cmd_extract(args, overrides: list[str]) -> int:
    cfg = _resolve_config(args, overrides)
    out = _prepare_out(cfg)
    model = load_checkpoint(args.checkpoint)
    dataset = load_data(cfg.data)
    label = Path(args.checkpoint).stem
    splits = {"query": dataset.query, "gallery": dataset.gallery, "train": dataset.train}
    names = ["query", "gallery"] if args.split == "both" else [args.split]
    batch_size = args.batch_size or cfg.train.batch_size
    for name in names:
        fm = extract_all(model, splits[name], cfg.augment, batch_size=batch_size,
                         source_label=label)
        path = out / f"{name}.ensf"
        save_features(fm, path)
        print(f"{name}: {fm.n_rows} descriptors of dimension {fm.dim} -> {path}")
    _write_snapshot(cfg, "extract",
                    {"checkpoint": str(args.checkpoint), "split": args.split}, out)
    return 0


def cmd_eval(args, overrides: list[str]) -> int:
    cfg = _resolve_config(args, overrides)
    out = _prepare_out(cfg)
    query = load_features(args.query_features)
    gallery = load_features(args.gallery_features)
    ranks = _ranks_from_args(cfg, args)
    rerank_params = _rerank_from_args(cfg, args) if args.rerank else None
    report, reranked = evaluate_features(query, gallery, ranks, rerank_params)
    print("cosine retrieval:")
    print(report.to_text(), end="")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    report.to_csv(out / "report.csv")
    if reranked is not None:
        print("after re-ranking:")
        print(reranked.to_text(), end="")
        (out / "report_reranked.txt").write_text(reranked.to_text(), encoding="utf-8")
        reranked.to_csv(out / "report_reranked.csv")
    _write_snapshot(cfg, "eval", {"query_features": str(args.query_features),
                                  "gallery_features": str(args.gallery_features),
                                  "rerank": bool(args.rerank),
                                  "ranks": list(ranks)}, out)
    return 0


def cmd_rerank(args, overrides: list[str]) -> int:
    cfg = _resolve_config(args, overrides)
    out = _prepare_out(cfg)
    query = load_features(args.query_features)
    gallery = load_features(args.gallery_features)
    params = _rerank_from_args(cfg, args)
    ranks = _ranks_from_args(cfg, args)
    baseline = cosine_distance(query, gallery)
    reranked = rerank(baseline, cosine_distance(query, query),
                      cosine_distance(gallery, gallery), params)
    matrix = FeatureMatrix(
        vectors=reranked.values.astype(np.float32),
        person_ids=query.person_ids,
        camera_ids=query.camera_ids,
        dim_tags=[DimTag(f"distances:{reranked.metric_tag}", 0, reranked.values.shape[1])],
    )
    dist_path = out / "distances_reranked.ensf"
    save_features(matrix, dist_path)
    report = evaluate(reranked, query.person_ids, query.camera_ids,
                      gallery.person_ids, gallery.camera_ids, ranks)
    print(report.to_text(), end="")
    (out / "report_reranked.txt").write_text(report.to_text(), encoding="utf-8")
    report.to_csv(out / "report_reranked.csv")
    print(f"re-ranked distances -> {dist_path}")
    _write_snapshot(cfg, "rerank", {"query_features": str(args.query_features),
                                    "gallery_features": str(args.gallery_features)}, out)
    return 0


def _subset_rows(queries: list[FeatureMatrix], galleries: list[FeatureMatrix],
                 sizes: list[int], repeats: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        if not 1 <= size <= len(queries):
            raise ValueError(f"subset size {size} outside 1..{len(queries)}")
        maps, rank1s = [], []
        for _ in range(repeats):
            picked = sorted(rng.choice(len(queries), size=size, replace=False))
            q = concat_ensemble([queries[i] for i in picked])
            g = concat_ensemble([galleries[i] for i in picked])
            report, _ = evaluate_features(q, g, ranks=(1,))
            maps.append(report.mAP)
            rank1s.append(report.cmc[1])
        rows.append({
            "subset_size": size,
            "repeats": repeats,
            "map_mean": float(np.mean(maps)),
            "map_var": float(np.var(maps)),
            "rank1_mean": float(np.mean(rank1s)),
            "rank1_var": float(np.var(rank1s)),
        })
    return rows


def cmd_ensemble(args, overrides: list[str]) -> int:
    cfg = _resolve_config(args, overrides)
    out = _prepare_out(cfg)
    paths = [Path(p) for p in args.inputs]
    if all(p.is_file() for p in paths):
        merged = concat_ensemble([load_features(p) for p in paths])
        target = out / "ensemble.ensf"
        save_features(merged, target)
        print(f"concatenated {len(paths)} feature files: {merged.n_rows} rows, "
              f"dimension {merged.dim} -> {target}")
        _write_snapshot(cfg, "ensemble", {"inputs": [str(p) for p in paths]}, out)
        return 0
    if not all(p.is_dir() for p in paths):
        raise ValueError("ensemble inputs must be all feature files or all run directories")
    queries, galleries = [], []
    for p in paths:
        for name in ("query.ensf", "gallery.ensf"):
            if not (p / name).is_file():
                raise FileNotFoundError(f"run directory {p} has no {name}")
        queries.append(load_features(p / "query.ensf"))
        galleries.append(load_features(p / "gallery.ensf"))
    full_q = concat_ensemble(queries)
    full_g = concat_ensemble(galleries)
    save_features(full_q, out / "query_ensemble.ensf")
    save_features(full_g, out / "gallery_ensemble.ensf")
    report, _ = evaluate_features(full_q, full_g, cfg.eval_ranks)
    print(f"full ensemble of {len(paths)} models (dimension {full_q.dim}):")
    print(report.to_text(), end="")
    (out / "report_ensemble.txt").write_text(report.to_text(), encoding="utf-8")
    report.to_csv(out / "report_ensemble.csv")
    if args.subset:
        sizes = [int(s) for s in str(args.subset).split(",") if s != ""]
        subset_seed = args.seed if args.seed is not None else 0
        rows = _subset_rows(queries, galleries, sizes, args.repeats, subset_seed)
        header = ["subset_size", "repeats", "map_mean", "map_var", "rank1_mean", "rank1_var"]
        with open(out / "ensemble_subsets.csv", "w", newline="", encoding="utf-8") as fh:
            import csv as _csv
            writer = _csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([row["subset_size"], row["repeats"]]
                                + [repr(row[k]) for k in header[2:]])
        for row in rows:
            print(f"subset {row['subset_size']}: mAP {row['map_mean']:.4f} "
                  f"(var {row['map_var']:.6f}), rank-1 {row['rank1_mean']:.4f} "
                  f"(var {row['rank1_var']:.6f})")
        print(f"subset table {out / 'ensemble_subsets.csv'}")
    _write_snapshot(cfg, "ensemble", {"inputs": [str(p) for p in paths],
                                      "subset": args.subset,
                                      "repeats": args.repeats,
                                      "seed": args.seed if args.seed is not None else 0},
                    out)
    return 0


def _save_line_plot(xs: list, series: dict[str, list], path, xlabel: str) -> None:
    fig = Figure(figsize=(5.5, 4.0))
    ax = fig.add_subplot()
    for label, ys in series.items():
        ax.plot(range(len(xs)), ys, marker="o", label=label)
    ax.set_xticks(range(len(xs)))
    ax.set_xticklabels([str(x) for x in xs])
    ax.set_xlabel(xlabel)
    ax.set_ylabel("retrieval quality")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def cmd_sweep(args, overrides: list[str]) -> int:
    cfg = _resolve_config(args, overrides)
    out = _prepare_out(cfg)
    dataset = load_data(cfg.data)
    if args.axis == "stride":
        points = [("last_stride", v) for v in (2, 1)]
        pooling = cfg.model.pooling
    elif args.axis == "branches":
        points = [("num_branches", n) for n in range(1, args.max_branches + 1)]
        pooling = "GAP_only"
    else:
        points = [("num_branches", n) for n in range(1, args.max_branches + 1)]
        pooling = "AAP"

    import csv as _csv
    rows = []
    failed = False
    for option, value in points:
        label = f"{option}={value}"
        try:
            point_cfg = cfg.with_overrides([
                f"model.{option}={value}",
                f"model.pooling={pooling}",
                f"model.num_classes={dataset.num_train_classes}",
            ])
            point_dir = out / f"{args.axis}_{value}"
            point_dir.mkdir(parents=True, exist_ok=True)
            model = EnsembleNet(point_cfg.model)
            init_model(model, seed=point_cfg.train.seed)
            model, log, _ = train(model, dataset, point_cfg.train, point_cfg.augment)
            log.to_csv(point_dir / "trainlog.csv")
            save_checkpoint(model, point_dir / "model.npz")
            query = extract_all(model, dataset.query, point_cfg.augment,
                                point_cfg.train.batch_size, label)
            gallery = extract_all(model, dataset.gallery, point_cfg.augment,
                                  point_cfg.train.batch_size, label)
            report, _ = evaluate_features(query, gallery, cfg.eval_ranks)
            (point_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
            rows.append([value, model.num_parts, repr(report.mAP)]
                        + [repr(report.cmc[k]) for k in sorted(report.cmc)] + ["ok"])
            print(f"{label}: mAP {report.mAP:.4f}, "
                  f"rank-1 {report.cmc[min(report.cmc)]:.4f}")
        except Exception as exc:  # record the failure, keep sweeping
            failed = True
            rows.append([value, num_part_vectors(cfg.model.num_branches, pooling)
                         if option == "last_stride" else num_part_vectors(value, pooling),
                         "", *[""] * len(cfg.eval_ranks), f"error: {exc}"])
            print(f"{label}: failed ({exc})", file=sys.stderr)

    header = ([args.axis if args.axis == "stride" else "num_branches", "num_objectives",
               "mAP"] + [f"rank{k}" for k in sorted(cfg.eval_ranks)] + ["status"])
    csv_path = out / f"sweep_{args.axis}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    ok_rows = [r for r in rows if r[-1] == "ok"]
    if ok_rows:
        xs = [r[0] for r in ok_rows]
        series = {"mAP": [float(r[2]) for r in ok_rows],
                  "rank-1": [float(r[3]) for r in ok_rows]}
        _save_line_plot(xs, series, out / f"sweep_{args.axis}.png",
                        "final-stage stride" if args.axis == "stride" else "branches")
    print(f"sweep table {csv_path}")
    _write_snapshot(cfg, "sweep", {"axis": args.axis,
                                   "max_branches": args.max_branches}, out)
    return 1 if failed else 0


def cmd_landscape(args, overrides: list[str]) -> int:
    cfg = _resolve_config(args, overrides)
    out = _prepare_out(cfg)
    model = load_checkpoint(args.checkpoint)
    dataset = load_data(cfg.data)
    bundle = make_eval_bundle(dataset, cfg.augment, args.max_query, args.max_gallery,
                              cfg.train.batch_size)
    delta = random_direction(model, args.seed_delta)
    eta = random_direction(model, args.seed_eta)
    lo, hi = args.range
    alphas = np.linspace(lo, hi, args.grid)
    betas = np.linspace(lo, hi, args.grid)
    metrics = ("mAP", "rank1") if args.metric == "both" else (args.metric,)
    grids = performance_surfaces(model, delta, eta, alphas, betas, bundle, metrics)
    for name, grid in grids.items():
        stem = f"landscape_{name}_d{args.seed_delta}e{args.seed_eta}_g{args.grid}x{args.grid}"
        grid_to_csv(grid, out / f"{stem}.csv")
        save_heatmap(grid, out / f"{stem}.png")
        area = near_center_area(grid)
        print(f"{name}: near-center area (>= 90% of center) {area:.3f} -> {stem}.png")
    _write_snapshot(cfg, "landscape",
                    {"checkpoint": str(args.checkpoint), "grid": args.grid,
                     "range": list(args.range), "seed_delta": args.seed_delta,
                     "seed_eta": args.seed_eta, "max_query": args.max_query,
                     "max_gallery": args.max_gallery}, out)
    return 0


def _rerank_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ranks", default=None,
                        help="comma list of CMC ranks to report, e.g. 1,5,10,20")
    parser.add_argument("--k1", type=int, default=None,
                        help="reciprocal-neighborhood size (default from config)")
    parser.add_argument("--k2", type=int, default=None,
                        help="query-expansion size (default from config)")
    parser.add_argument("--lambda", type=float, default=None, dest="lambda_value",
                        help="blend weight on the original distance (default from config)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ensemble-reid",
        description="Multi-branch ensemble embeddings for person re-identification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    _common_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract flip-averaged descriptors")
    _common_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("query", "gallery", "train", "both"), default="both")
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="CMC/mAP evaluation of stored features")
    _common_options(p)
    p.add_argument("--query-features", required=True)
    p.add_argument("--gallery-features", required=True)
    p.add_argument("--rerank", action="store_true",
                   help="also report k-reciprocal re-ranked results")
    _rerank_options(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rerank", help="write re-ranked distances and their report")
    _common_options(p)
    p.add_argument("--query-features", required=True)
    p.add_argument("--gallery-features", required=True)
    _rerank_options(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("ensemble", help="concatenate independent models' features")
    _common_options(p)
    p.add_argument("inputs", nargs="+",
                   help="feature files to merge, or run directories with "
                        "query.ensf/gallery.ensf")
    p.add_argument("--subset", default=None,
                   help="ensemble size r to sample, or comma list, e.g. 1,2,3,4")
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("sweep", help="train/evaluate along one architecture axis")
    _common_options(p)
    p.add_argument("--axis", choices=("stride", "branches", "aap"), required=True)
    p.add_argument("--max-branches", type=int, default=6)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("landscape", help="filter-normalized metric surfaces")
    _common_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", type=int, default=21, help="points per axis (default 21)")
    p.add_argument("--range", type=float, nargs=2, default=(-1.0, 1.0),
                   metavar=("LO", "HI"))
    p.add_argument("--seed-delta", type=int, default=1)
    p.add_argument("--seed-eta", type=int, default=2)
    p.add_argument("--max-query", type=int, default=200)
    p.add_argument("--max-gallery", type=int, default=500)
    p.add_argument("--metric", choices=("mAP", "rank1", "both"), default="both")
    p.set_defaults(func=cmd_landscape)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args, unknown = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    overrides = []
    bad = []
    for token in unknown:
        m = _OVERRIDE_TOKEN.fullmatch(token)
        if m:
            overrides.append(f"{m.group(1)}={m.group(2)}")
        else:
            bad.append(token)
    if bad:
        print(f"error: unrecognized arguments: {' '.join(bad)}", file=sys.stderr)
        return 2
    overrides.extend(args.set)
    try:
        return args.func(args, overrides)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())
