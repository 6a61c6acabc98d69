"""Command-line orchestration of the pipeline.

Tile inputs for a slide live in one directory as CVTT tensors named by the
tile origin: t{row:06d}_{col:06d}.np.cvtt / .hv.cvtt / .types.cvtt /
.inst.cvtt / .tokens.cvtt plus .tokens.json metadata ({"P", "H", "W",
"k_extra", "encoder"}). Every command is a pure function of its inputs and
flags: same inputs, same bytes out. `--seed` threads through every
stochastic stage and `--log` appends JSON lines with stage timings that
`co2` can turn into an energy estimate.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import clsmod, datagen, metrics, postproc, tokens, wsi
from .errors import CellKitError
from .tensorio import (
    CellRecord,
    read_cells,
    read_embeddings,
    read_tensor,
    write_cells,
    write_geojson,
    write_tensor,
)

__version__ = "0.1.0"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; bad flags are validation
        self.exit(1, f"{self.prog}: error: {message}\n")


def _tile_stem(origin: tuple[int, int]) -> str:
    return f"t{origin[0]:06d}_{origin[1]:06d}"


def _parse_origin(text: str) -> tuple[int, int]:
    r, c = (int(v) for v in text.split(","))
    return r, c


def _load_probmaps(np_path: Path, hv_path: Path, types_path: Path | None) -> postproc.ProbMaps:
    return postproc.ProbMaps(
        np_map=read_tensor(np_path),
        hv_map=read_tensor(hv_path),
        type_map=read_tensor(types_path) if types_path else None,
    )


def _postproc_params(args) -> postproc.PostprocParams:
    return postproc.PostprocParams(
        tau_np=args.tau_np, tau_m=args.tau_m, s_min=args.s_min, m_min=args.m_min
    )


def _add_postproc_flags(p) -> None:
    p.add_argument("--tau-np", type=float, default=0.5)
    p.add_argument("--tau-m", type=float, default=0.4)
    p.add_argument("--s-min", type=int, default=10)
    p.add_argument("--m-min", type=int, default=10)


def cmd_postprocess(args) -> int:
    maps = _load_probmaps(args.np, args.hv, args.types)
    inst = postproc.postprocess(maps, _postproc_params(args))
    write_tensor(args.out_inst, inst.labels)
    if args.out_cells:
        cells = postproc.extract_instances(inst, args.slide_id, _parse_origin(args.origin))
        if maps.type_map is not None:
            dists = postproc.assign_types(inst, maps.type_map)
            for cell in cells:
                d = dists[cell.source_instance]
                cell.class_probs = d
                cell.class_label = int(np.argmax(d))
        write_cells(args.out_cells, [postproc.to_record(c) for c in cells])
    print(f"instances: {inst.n_instances}")
    return 0


def _tile_instances(tiles_dir: Path, plan: wsi.TilePlan, slide_id: str):
    """Load per-tile instance maps and lift them to global instances."""
    per_tile = []
    for origin in plan.origins:
        path = tiles_dir / f"{_tile_stem(origin)}.inst.cvtt"
        if not path.exists():
            continue
        inst = postproc.InstanceMap(read_tensor(path))
        per_tile.append((origin, postproc.extract_instances(inst, slide_id, origin)))
    return per_tile


def cmd_merge(args) -> int:
    plan = wsi.TilePlan.load(args.plan)
    per_tile = _tile_instances(Path(args.tiles), plan, args.slide_id)
    merged = wsi.merge_cells(per_tile, plan)
    write_cells(args.out, merged)
    print(f"cells: {len(merged)}")
    return 0


def _load_token_grid(tiles_dir: Path, origin: tuple[int, int]) -> tokens.TokenGrid:
    stem = tiles_dir / _tile_stem(origin)
    meta = json.loads(Path(f"{stem}.tokens.json").read_text())
    flat = read_tensor(f"{stem}.tokens.cvtt")
    if flat.ndim == 3:
        return tokens.TokenGrid(
            grid=flat,
            patch_size=meta["P"],
            k_extra=meta.get("k_extra", 0),
            encoder=meta.get("encoder", ""),
        )
    return tokens.reshape_tokens(
        flat, meta["P"], meta["H"], meta["W"], meta.get("k_extra", 0), meta.get("encoder", "")
    )


def _embed_records(records: list[CellRecord], tiles_dir: Path) -> np.ndarray:
    """Embedding matrix for merged records, via their provenance tiles."""
    by_tile: dict[tuple[int, int], list[int]] = {}
    for i, rec in enumerate(records):
        origin = tuple(rec.extra["tile_origin"])
        by_tile.setdefault(origin, []).append(i)

    vectors: dict[int, np.ndarray] = {}
    for origin, rows in sorted(by_tile.items()):
        inst = postproc.InstanceMap(read_tensor(tiles_dir / f"{_tile_stem(origin)}.inst.cvtt"))
        grid = _load_token_grid(tiles_dir, origin)
        by_instance = {e.cell_id: e.vector for e in tokens.extract_embeddings(inst, grid)}
        for i in rows:
            vectors[i] = by_instance[records[i].extra["source_instance"]]
    return np.stack([vectors[i] for i in range(len(records))]).astype(np.float32)


def cmd_embed(args) -> int:
    records = read_cells(args.cells)
    matrix = _embed_records(records, Path(args.tiles))
    from .tensorio import write_embeddings

    write_embeddings(args.out_embeddings, args.out_index, matrix, [r.cell_id for r in records])
    print(f"embeddings: {matrix.shape[0]} x {matrix.shape[1]}")
    return 0


def _instances_from_records(records: list[CellRecord], tiles_dir: Path, slide_id: str):
    """Rebuild CellInstance objects (with masks) for merged records."""
    by_tile: dict[tuple[int, int], list[CellRecord]] = {}
    for rec in records:
        by_tile.setdefault(tuple(rec.extra["tile_origin"]), []).append(rec)
    out = []
    for origin, recs in sorted(by_tile.items()):
        inst = postproc.InstanceMap(read_tensor(tiles_dir / f"{_tile_stem(origin)}.inst.cvtt"))
        cells = {c.source_instance: c for c in postproc.extract_instances(inst, slide_id, origin)}
        for rec in recs:
            cell = cells[rec.extra["source_instance"]]
            cell.cell_id = rec.cell_id
            cell.class_label = rec.class_label
            out.append(cell)
    return out


def cmd_genlabels(args) -> int:
    records = read_cells(args.cells)
    cells = _instances_from_records(records, Path(args.tiles), args.slide_id)
    mask = datagen.IFMask(mask=read_tensor(args.if_mask), antibody=args.antibody)
    labeled = datagen.label_from_if(cells, mask, threshold=args.threshold)
    if args.fov:
        r0, c0, r1, c1 = (float(v) for v in args.fov.split(","))
        labeled = datagen.filter_by_fov(labeled, datagen.FOV(r0, c0, r1, c1))
    write_cells(args.out, [postproc.to_record(c) for c in labeled])
    positives = sum(1 for c in labeled if c.class_label == 1)
    print(f"cells: {len(labeled)}  positive: {positives}")
    return 0


def _train_config(args, seed: int) -> clsmod.TrainConfig:
    return clsmod.TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        schedule=args.schedule,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=seed,
    )


def cmd_train(args) -> int:
    data = clsmod.load_labeled_set(args.set)
    result = clsmod.train(data, _train_config(args, args.seed), hidden=args.hidden)
    clsmod.save_checkpoint(
        args.out_checkpoint,
        result.params,
        {"class_names": data.class_names, "encoder": args.encoder},
    )
    if args.history:
        clsmod.write_history(args.history, result.history)
    print(f"best epoch: {result.best_epoch}  val AUROC: {result.best_auroc:.4f}")
    return 0


def cmd_tune(args) -> int:
    cache = clsmod.EmbeddingCache(lambda: clsmod.load_labeled_set(args.set))
    base = clsmod.TrainConfig(max_epochs=args.max_epochs, patience=args.patience)
    result = clsmod.tune(cache, n_runs=args.runs, seed=args.seed, base_config=base)
    leaderboard = [
        {
            "run": t.run,
            "hidden": t.hidden,
            "lr": t.config.lr,
            "weight_decay": t.config.weight_decay,
            "schedule": t.config.schedule,
            "val_auroc": t.val_auroc,
        }
        for t in result.leaderboard
    ]
    Path(args.out).write_text(json.dumps(
        {"extraction_passes": result.extractions, "leaderboard": leaderboard},
        indent=2, sort_keys=True,
    ))
    print(f"extraction passes: {result.extractions}")
    print(f"best: hidden={result.best.hidden} lr={result.best.config.lr:.2e} "
          f"auroc={result.best.val_auroc:.4f}")
    return 0


def _classify_records(records: list[CellRecord], matrix: np.ndarray, checkpoint: Path):
    params, header = clsmod.load_checkpoint(checkpoint)
    probs, labels = clsmod.predict(params, matrix)
    for rec, p, y in zip(records, probs, labels):
        rec.class_probs = [float(v) for v in p]
        rec.class_label = int(y)
    return header.get("class_names", [])


def _write_geojson_file(path: Path, records: list[CellRecord], class_names: list[str]) -> None:
    doc = write_geojson(records, dict(enumerate(class_names)))
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def cmd_predict(args) -> int:
    tiles_dir = Path(args.tiles)
    if args.cells and args.embeddings and args.index:
        records = read_cells(args.cells)
        matrix, ids = read_embeddings(args.embeddings, args.index)
        if ids != [r.cell_id for r in records]:
            raise CellKitError("embedding index does not match the cell store")
    else:
        plan = wsi.TilePlan.load(args.plan)
        params = _postproc_params(args)
        threads = args.threads or os.cpu_count() or 1

        def run_tile(origin):
            stem = tiles_dir / _tile_stem(origin)
            maps = _load_probmaps(Path(f"{stem}.np.cvtt"), Path(f"{stem}.hv.cvtt"), None)
            inst = postproc.postprocess(maps, params)
            write_tensor(f"{stem}.inst.cvtt", inst.labels)
            return origin, postproc.extract_instances(inst, args.slide_id, origin)

        available = [o for o in plan.origins
                     if (tiles_dir / f"{_tile_stem(o)}.np.cvtt").exists()]
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_tile = list(pool.map(run_tile, available))
            per_tile.sort(key=lambda item: item[0])
        else:
            per_tile = [run_tile(o) for o in available]
        records = wsi.merge_cells(per_tile, plan)
        matrix = _embed_records(records, tiles_dir)

    class_names = _classify_records(records, matrix, args.checkpoint)
    _write_geojson_file(args.out, records, class_names)
    print(f"cells: {len(records)}")
    return 0


def _instmap_pairs(pred: Path, gt: Path):
    if pred.is_dir() != gt.is_dir():
        raise CellKitError("--pred and --gt must both be files or both directories")
    if not pred.is_dir():
        return [(pred, gt)]
    names = sorted(p.name for p in pred.glob("*.cvtt"))
    return [(pred / n, gt / n) for n in names if (gt / n).exists()]


def _load_class_map(path: Path) -> dict[int, int]:
    side = path.with_suffix(".classes.json")
    if not side.exists():
        return {}
    return {int(k): int(v) for k, v in json.loads(side.read_text()).items()}


def cmd_evaluate(args) -> int:
    pairs = []
    det_matches: dict[int, list] = {}
    for pred_path, gt_path in _instmap_pairs(Path(args.pred), Path(args.gt)):
        pred = postproc.InstanceMap(read_tensor(pred_path))
        gt = postproc.InstanceMap(read_tensor(gt_path))
        pred_classes = _load_class_map(pred_path)
        gt_classes = _load_class_map(gt_path)
        pairs.append(metrics.ImagePair(pred=pred, gt=gt,
                                       pred_classes=pred_classes, gt_classes=gt_classes))
        p_ids = pred.ids
        g_ids = gt.ids
        matches = metrics.match_detections(
            np.array([pred.centroids[int(i)] for i in p_ids]) if len(p_ids) else np.zeros((0, 2)),
            np.array([pred_classes.get(int(i), 1) for i in p_ids]),
            np.array([gt.centroids[int(i)] for i in g_ids]) if len(g_ids) else np.zeros((0, 2)),
            np.array([gt_classes.get(int(i), 1) for i in g_ids]),
        )
        for cls, m in matches.items():
            det_matches.setdefault(cls, []).append(m)

    report = metrics.mpq_suite(pairs)

    pooled = {
        cls: metrics.MatchSets(
            tp=[t for m in ms for t in m.tp],
            fp=[f for m in ms for f in m.fp],
            fn=[f for m in ms for f in m.fn],
        )
        for cls, ms in det_matches.items()
    }
    det = metrics.detection_scores(pooled)

    table = [
        ("bPQ", report.bpq),
        ("mPQ", report.mpq),
        ("mPQ+", report.mpq_plus),
        ("Dice", report.dice),
        ("mPrecision", det.precision),
        ("mRecall", det.recall),
        ("mF1", det.f1),
    ]
    width = max(len(k) for k, _ in table)
    for key, value in table:
        print(f"{key:<{width}}  {value:.4f}")

    out = report.to_json()
    out["detection"] = {
        "precision": det.precision,
        "recall": det.recall,
        "f1": det.f1,
        "per_class": {str(c): list(v) for c, v in sorted(det.per_class.items())},
    }
    if args.out_prefix:
        Path(f"{args.out_prefix}.json").write_text(json.dumps(out, indent=2, sort_keys=True))
        import csv as _csv

        with open(f"{args.out_prefix}.csv", "w", newline="") as f:
            _csv.writer(f).writerows(report.to_csv_rows())
    return 0


def cmd_subsample(args) -> int:
    data = clsmod.load_labeled_set(args.set)
    if args.mode == "ratio":
        out = clsmod.ratio_sample(data, args.positive_class, args.ratio, args.seed)
    else:
        if args.split:
            keep = data.split_indices(args.split)
            sampled = clsmod.stratified_fraction(data.subset(keep), args.fraction, args.seed)
            rest = np.flatnonzero(data.splits != args.split)
            kept_ids = set(sampled.cell_ids)
            keep_all = sorted(
                set(rest.tolist()) | {i for i in keep if data.cell_ids[i] in kept_ids}
            )
            out = data.subset(np.array(keep_all, dtype=np.int64))
        else:
            out = clsmod.stratified_fraction(data, args.fraction, args.seed)
    clsmod.save_labeled_set(args.out, out)
    print(f"cells: {len(out.labels)}")
    return 0


def cmd_resample(args) -> int:
    arr = read_tensor(args.infile)
    if args.mode == "image":
        out = wsi.lanczos_resample(arr, args.scale)
        write_tensor(args.out, out.astype(np.float32))
    else:
        resampled, dropped = wsi.resample_labels(postproc.InstanceMap(arr), args.scale)
        write_tensor(args.out, resampled.labels)
        print(f"dropped instances: {dropped}")
    return 0


def cmd_pyramid(args) -> int:
    from PIL import Image

    path = Path(args.image)
    if path.suffix == ".cvtt":
        base = read_tensor(path).astype(np.float64)
    else:
        base = np.asarray(Image.open(path), dtype=np.float64)
    out_dir = Path(args.out_dir)
    tile = args.tile
    levels = []
    level = 0
    img = base
    while True:
        levels.append({"level": level, "width": img.shape[1], "height": img.shape[0]})
        level_dir = out_dir / str(level)
        level_dir.mkdir(parents=True, exist_ok=True)
        for ty in range(0, img.shape[0], tile):
            for tx in range(0, img.shape[1], tile):
                chunk = np.clip(img[ty:ty + tile, tx:tx + tile], 0, 255).astype(np.uint8)
                Image.fromarray(chunk).save(level_dir / f"{tx // tile}_{ty // tile}.jpg",
                                            quality=90)
        if max(img.shape[0], img.shape[1]) <= tile:
            break
        img = wsi.lanczos_resample(img, 0.5)
        level += 1
    (out_dir / "meta.json").write_text(json.dumps(
        {"tile_size": tile, "levels": levels, "width": base.shape[1], "height": base.shape[0]},
        indent=2, sort_keys=True,
    ))
    print(f"levels: {len(levels)}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    bind = os.environ.get("CELLKIT_BIND", "")
    host = args.host
    port = args.port
    if bind:
        host, _, port_text = bind.partition(":")
        port = int(port_text or port)
    app = create_app(args.workspace)
    uvicorn.run(app, host=host, port=port)
    return 0


def cmd_co2(args) -> int:
    if args.wh is not None:
        wh = args.wh
    else:
        seconds = 0.0
        with open(args.log, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    seconds += float(json.loads(line).get("seconds", 0.0))
        wh = seconds / 3600.0 * args.watts
    kg = metrics.co2_report(wh, carbon_intensity=args.intensity)
    print(f"{kg:.2f} kg CO2 eq.")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cellkit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log", help="append a JSON-lines timing record here")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("postprocess", help="instance maps from NP/HV tensors")
    p.add_argument("--np", required=True, type=Path)
    p.add_argument("--hv", required=True, type=Path)
    p.add_argument("--types", type=Path)
    p.add_argument("--out-inst", required=True)
    p.add_argument("--out-cells")
    p.add_argument("--slide-id", default="")
    p.add_argument("--origin", default="0,0")
    _add_postproc_flags(p)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("merge", help="merge per-tile detections across a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--tiles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slide-id", default="")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("embed", help="extract per-cell token embeddings")
    p.add_argument("--cells", required=True)
    p.add_argument("--tiles", required=True)
    p.add_argument("--out-embeddings", required=True)
    p.add_argument("--out-index", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("genlabels", help="label cells from a registered IF mask")
    p.add_argument("--cells", required=True)
    p.add_argument("--tiles", required=True)
    p.add_argument("--if-mask", required=True)
    p.add_argument("--threshold", type=float, default=datagen.IF_OVERLAP_THRESHOLD)
    p.add_argument("--antibody", default="")
    p.add_argument("--fov")
    p.add_argument("--slide-id", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_genlabels)

    p = sub.add_parser("train", help="train the cell classifier on a labeled set")
    p.add_argument("--set", required=True)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--schedule", choices=("exponential", "halve"), default="exponential")
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--encoder", default="")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="random hyperparameter search")
    p.add_argument("--set", required=True)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("predict", help="full chain: recover, merge, embed, classify")
    p.add_argument("--tiles", required=True)
    p.add_argument("--plan")
    p.add_argument("--cells")
    p.add_argument("--embeddings")
    p.add_argument("--index")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", required=True)
    p.add_argument("--slide-id", default="")
    p.add_argument("--threads", type=int, default=0)
    _add_postproc_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="detection + panoptic metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out-prefix")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("subsample", help="class-ratio or stratified subsampling")
    p.add_argument("mode", choices=("ratio", "fraction"))
    p.add_argument("--set", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--positive-class", type=int, default=1)
    p.add_argument("--ratio", type=int, default=1)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--split")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("resample", help="Lanczos image / nearest label rescaling")
    p.add_argument("mode", choices=("image", "labels"))
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("pyramid", help="build a tile pyramid for the viewer")
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tile", type=int, default=256)
    p.set_defaults(func=cmd_pyramid)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    p.add_argument("--workspace", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("co2", help="carbon report from energy or timing logs")
    p.add_argument("--wh", type=float)
    p.add_argument("--log", dest="log", default=None)
    p.add_argument("--watts", type=float, default=250.0)
    p.add_argument("--intensity", type=float, default=metrics.CARBON_INTENSITY)
    p.set_defaults(func=cmd_co2)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.monotonic()
    try:
        rc = args.func(args)
    except (CellKitError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # pragma: no cover - defensive
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    if getattr(args, "log", None) and args.command != "co2":
        with open(args.log, "a", encoding="utf-8") as f:
            f.write(json.dumps(
                {"stage": args.command, "seconds": time.monotonic() - start},
                separators=(",", ":"),
            ) + "\n")
    return rc


if __name__ == "__main__":
    sys.exit(main())
