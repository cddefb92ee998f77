"""Command-line entry point wiring all pipelines.

Subcommands: synth, gen-labels, eval-noc, eval-ar, train-toy, gradcheck,
serve. Every run starts with a one-line echo of the fully resolved
configuration; failures print machine-readable JSON to stderr and exit
nonzero. All subcommands are deterministic under --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .conquer import DEFAULT_THETAS

DEFAULTS = {
    "tau_conf": 0.3,
    "tau_overlap": 0.8,
    "tau_area": 0.02,
    "tau_sim": 0.15,
    "eps_floor": 1e-6,
    "thetas": list(DEFAULT_THETAS),
    "nms_iou": 0.9,
    "max_instances": 8,
    "d_fourier": 128,
    "d_model": 64,
    "focal_weight": 20.0,
    "dice_weight": 1.0,
    "sweep": "0.1:1.0:0.1",
    "targets": [0.8, 0.9],
    "max_clicks": 20,
    "max_dets": 1000,
    "conf_floor": 0.0,
    "patch_size": 16,
    "epochs": 60,
    "batch": 32,
    "lr": 2e-3,
    "images": 200,
    "grid": 32,
    "feature_dim": 16,
    "seed": 0,
    "jobs": 0,  # 0 = all cores
    "port": 8000,
}


def parse_sweep(text: str) -> list[float]:
    """Parse 'start:stop:step' (inclusive) into a granularity grid."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"sweep must be start:stop:step, got {text!r}")
    start, stop, step = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise ValueError(f"invalid sweep {text!r}")
    grid = []
    k = 0
    while True:
        g = round(start + k * step, 10)
        if g > stop + 1e-9:
            break
        grid.append(g)
        k += 1
    return grid


def _parse_floats(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="granseg", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="JSON file of option defaults (flags win)")
        p.add_argument("--seed", type=int)
        return p

    p = add("synth", "generate synthetic feature files with ground-truth label files")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--images", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--png", action="store_true", help="also render PNG thumbnails")

    p = add("gen-labels", "build pseudo-label hierarchies from feature files")
    p.add_argument("--features-dir", dest="features_dir", type=Path,
                   default=os.environ.get("UGS_DATA_DIR"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tau-conf", dest="tau_conf", type=float)
    p.add_argument("--tau-overlap", dest="tau_overlap", type=float)
    p.add_argument("--tau-area", dest="tau_area", type=float)
    p.add_argument("--tau-sim", dest="tau_sim", type=float)
    p.add_argument("--eps-floor", dest="eps_floor", type=float)
    p.add_argument("--thetas", type=_parse_floats)
    p.add_argument("--nms-iou", dest="nms_iou", type=float)
    p.add_argument("--max-instances", dest="max_instances", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--gt-dir", dest="gt_dir", type=Path,
                   help="fuse ground-truth label files from this directory into the divide stage")
    p.add_argument("--jobs", type=int)

    p = add("eval-noc", "interactive click-simulation benchmark (NoC / 1-IoU)")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--labels", type=Path, help="label dir for the hierarchy-query segmenter")
    p.add_argument("--segmenter", choices=["hierarchy", "oracle"], default="hierarchy",
                   help="'oracle' answers from the ground-truth label files themselves")
    p.add_argument("--targets", type=_parse_floats)
    p.add_argument("--sweep")
    p.add_argument("--max-clicks", dest="max_clicks", type=int)
    p.add_argument("--out", type=Path, help="write the JSON report here")

    p = add("eval-ar", "whole-image proposal evaluation (average recall)")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--labels", type=Path, help="label dir supplying proposals")
    p.add_argument("--segmenter", choices=["hierarchy", "oracle"], default="hierarchy")
    p.add_argument("--sweep")
    p.add_argument("--conf-floor", dest="conf_floor", type=float)
    p.add_argument("--max-dets", dest="max_dets", type=int)
    p.add_argument("--out", type=Path)

    p = add("train-toy", "train the toy granularity decoder on a synthetic corpus")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--metrics", type=Path, help="JSON-lines metrics path")
    p.add_argument("--images", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)

    p = add("gradcheck", "finite-difference check of the decoder gradients")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--params", type=int, default=200)

    p = add("serve", "serve labels over HTTP")
    p.add_argument("--data-dir", dest="data_dir", type=Path,
                   default=os.environ.get("UGS_DATA_DIR"))
    p.add_argument("--port", type=int)
    p.add_argument("--host", default="127.0.0.1")

    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, config-file values, and explicit flags (flags win)."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text())
    cfg = dict(DEFAULTS)
    cfg.update({k: v for k, v in file_cfg.items() if k in DEFAULTS})
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key, val in vars(args).items():
        if key not in cfg and key not in ("config",) and val is not None:
            cfg[key] = str(val) if isinstance(val, Path) else val
    return cfg


def _echo(cfg: dict) -> None:
    printable = {k: v for k, v in sorted(cfg.items())}
    print("config:", json.dumps(printable, default=str))


def _gen_one(job: tuple[str, str, str, dict, str | None]) -> tuple[str, int, int]:
    in_path, out_path, image_id, cfg, gt_path = job
    from .divide import DivideConfig
    from .conquer import ThresholdSchedule
    from .features import read_features
    from .hierarchy import HierarchyConfig, build_pseudolabels, load_labels, save_labels

    fmap = read_features(in_path, normalize=True)
    gt_masks = None
    if gt_path:
        gt_masks = [gm.pixels() for gm in load_labels(gt_path).all_masks()]
    labels = build_pseudolabels(
        fmap,
        DivideConfig(
            tau_sim=cfg["tau_sim"],
            eps_floor=cfg["eps_floor"],
            max_instances=cfg["max_instances"],
            tau_conf=cfg["tau_conf"],
        ),
        ThresholdSchedule(tuple(cfg["thetas"])),
        HierarchyConfig(
            tau_area=cfg["tau_area"], tau_overlap=cfg["tau_overlap"], nms_iou=cfg["nms_iou"]
        ),
        image_id=image_id,
        patch_size=cfg["patch_size"],
        gt_masks=gt_masks,
    )
    save_labels(labels, out_path)
    n_masks = len(labels.all_masks())
    return image_id, len(labels.hierarchies), n_masks


def cmd_gen_labels(args: argparse.Namespace, cfg: dict) -> int:
    if args.features_dir is None:
        raise ValueError("--features-dir (or UGS_DATA_DIR) is required")
    features_dir = Path(args.features_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    feature_files = sorted(features_dir.glob("*.ugf"))
    if not feature_files:
        raise FileNotFoundError(f"no *.ugf files under {features_dir}")
    jobs = []
    for path in feature_files:
        image_id = path.stem
        gt_path = None
        if getattr(args, "gt_dir", None):
            cand = Path(args.gt_dir) / f"{image_id}.labels.json"
            gt_path = str(cand) if cand.exists() else None
        jobs.append((str(path), str(out_dir / f"{image_id}.labels.json"), image_id, cfg, gt_path))
    n_jobs = cfg["jobs"] or os.cpu_count() or 1
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_gen_one, jobs))
    else:
        results = [_gen_one(j) for j in jobs]
    total_h = sum(r[1] for r in results)
    total_m = sum(r[2] for r in results)
    print(f"{total_h} hierarchies, {total_m} masks ({len(results)} images -> {out_dir})")
    return 0


def cmd_synth(args: argparse.Namespace, cfg: dict) -> int:
    import numpy as np

    from .features import RegionSpec, SynthSpec, synth_features, write_features
    from .hierarchy import (
        GranularMask,
        MaskHierarchy,
        PseudoLabelSet,
        granularity_scores,
        save_labels,
    )
    from .masks import rle_encode, upsample

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    grid = cfg["grid"]
    ps = cfg["patch_size"]
    for k in range(cfg["images"]):
        third = grid // 3
        regions = []
        anchors = [(1, 1), (1, 2 * third + 1), (2 * third + 1, 1)]
        for ar, ac in anchors:
            h = int(rng.integers(third - 2, third))
            w = int(rng.integers(third - 2, third))
            parent_idx = len(regions)
            regions.append(RegionSpec("rectangle", (ar, ac, ar + h, ac + w)))
            ih = max(2, h // 2 - 1)
            iw = max(2, w // 2 - 1)
            ir, ic = ar + (h - ih) // 2, ac + (w - iw) // 2
            regions.append(RegionSpec("rectangle", (ir, ic, ir + ih, ic + iw), parent=parent_idx))
        spec = SynthSpec(
            height=grid,
            width=grid,
            dim=cfg["feature_dim"],
            regions=regions,
            noise_sigma=0.0,
            seed=int(rng.integers(0, 2**31)),
            background="noise",
            child_cos=(0.35, 0.65),
        )
        res = synth_features(spec)
        image_id = f"synth{k:04d}"
        write_features(res.features, out_dir / f"{image_id}.ugf")

        hierarchies = []
        tops = [i for i, p in enumerate(res.parents) if p is None]
        for iid, top in enumerate(tops):
            members = [top] + [i for i, p in enumerate(res.parents) if p == top]
            areas = [int(res.masks[i].sum()) * ps * ps for i in members]
            gs = granularity_scores(areas)
            gms = [
                GranularMask(
                    mask=rle_encode(upsample(res.masks[i], ps)),
                    granularity=g,
                    confidence=1.0,
                    instance_id=iid,
                    level="gt",
                )
                for i, g in zip(members, gs)
            ]
            root = max(range(len(gms)), key=lambda j: areas[j])
            children = [gm for j, gm in enumerate(gms) if j != root]
            hierarchies.append(MaskHierarchy(instance_id=iid, root=gms[root], children=children))
        labels = PseudoLabelSet(
            image_id=image_id, height=grid * ps, width=grid * ps, hierarchies=hierarchies
        )
        save_labels(labels, out_dir / f"{image_id}.gt.labels.json")
        if args.png:
            _render_png(res, out_dir / f"{image_id}.png", ps)
    print(f"wrote {cfg['images']} synthetic images to {out_dir}")
    return 0


def _render_png(res, path: Path, ps: int) -> None:
    import numpy as np
    from PIL import Image

    h, w = res.masks[0].shape if res.masks else (32, 32)
    rgb = np.full((h, w, 3), 40, dtype=np.uint8)
    rng = np.random.default_rng(0)
    for mask in res.masks:
        color = rng.integers(60, 255, size=3)
        rgb[mask] = color
    rgb = np.repeat(np.repeat(rgb, ps, axis=0), ps, axis=1)
    Image.fromarray(rgb).save(path)


def _build_segmenter(args: argparse.Namespace, manifest: dict):
    from .evaluation import HierarchyQuerySegmenter
    from .hierarchy import load_labels

    if args.segmenter == "oracle":
        sources = {item["image_id"]: item["gt_labels"] for item in manifest["items"]}
    else:
        if args.labels is None:
            raise ValueError("--labels is required for the hierarchy segmenter")
        sources = {
            item["image_id"]: str(Path(args.labels) / f"{item['image_id']}.labels.json")
            for item in manifest["items"]
        }
    return HierarchyQuerySegmenter({k: load_labels(v) for k, v in sources.items()})


def cmd_eval_noc(args: argparse.Namespace, cfg: dict) -> int:
    from .evaluation import load_manifest, run_benchmark

    manifest = load_manifest(args.manifest)
    seg = _build_segmenter(args, manifest)
    report = run_benchmark(
        seg,
        manifest,
        iou_targets=cfg["targets"],
        g_grid=parse_sweep(cfg["sweep"]),
        max_clicks=cfg["max_clicks"],
    )
    print(report.to_text())
    payload = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(payload)
    else:
        print(payload)
    return 0


def cmd_eval_ar(args: argparse.Namespace, cfg: dict) -> int:
    from .evaluation import average_recall, load_manifest
    from .hierarchy import aggregate_proposals, load_labels

    manifest = load_manifest(args.manifest)
    grid = parse_sweep(cfg["sweep"])
    if args.segmenter == "oracle":
        label_paths = {item["image_id"]: item["gt_labels"] for item in manifest["items"]}
    else:
        if args.labels is None:
            raise ValueError("--labels is required for the hierarchy segmenter")
        label_paths = {
            item["image_id"]: str(Path(args.labels) / f"{item['image_id']}.labels.json")
            for item in manifest["items"]
        }
    total_weighted = 0.0
    total_gt = 0
    for item in manifest["items"]:
        gt_masks = [gm.pixels() for gm in load_labels(item["gt_labels"]).all_masks()]
        proposals = aggregate_proposals(
            load_labels(label_paths[item["image_id"]]), grid, cfg["conf_floor"], cfg["max_dets"]
        )
        ar = average_recall(proposals, gt_masks, max_dets=cfg["max_dets"])
        total_weighted += ar * len(gt_masks)
        total_gt += len(gt_masks)
    ar = total_weighted / total_gt if total_gt else 0.0
    result = {"name": manifest["name"], "ar": ar, "gt_instances": total_gt, "g_grid": grid}
    print(f"AR{cfg['max_dets']}: {ar * 100:.1f} over {total_gt} instances")
    payload = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(payload)
    else:
        print(payload)
    return 0


def cmd_train_toy(args: argparse.Namespace, cfg: dict) -> int:
    from .decoder import TrainConfig, build_training_corpus, save_checkpoint, train_toy

    tc = TrainConfig(
        epochs=cfg["epochs"],
        batch=cfg["batch"],
        lr=cfg["lr"],
        seed=cfg["seed"],
        focal_weight=cfg["focal_weight"],
        dice_weight=cfg["dice_weight"],
        d_model=cfg["d_model"],
        d_fourier=cfg["d_fourier"],
        grid=cfg["grid"],
        feature_dim=cfg["feature_dim"],
    )
    corpus = build_training_corpus(cfg["images"], tc)
    model, metrics = train_toy(corpus, tc, log_path=args.metrics)
    save_checkpoint(model, args.out)
    last = metrics[-1]
    print(
        f"trained {cfg['epochs']} epochs on {cfg['images']} images; "
        f"final loss {last['train_loss']:.4f}, val 1-IoU {last['val_one_iou']:.4f} -> {args.out}"
    )
    return 0


def cmd_gradcheck(args: argparse.Namespace, cfg: dict) -> int:
    from .decoder import GranularityDecoder, TrainConfig, build_training_corpus, grad_check

    tc = TrainConfig(grid=12, feature_dim=cfg["feature_dim"], seed=cfg["seed"])
    corpus = build_training_corpus(3, tc)
    model = GranularityDecoder(
        d_model=cfg["d_model"],
        d_fourier=cfg["d_fourier"],
        feature_dim=cfg["feature_dim"],
        seed=cfg["seed"],
    )
    err = grad_check(model, corpus[0], (tc.grid, tc.grid), eps=args.eps, n_params=args.params, seed=cfg["seed"])
    print(f"gradcheck: max relative error {err:.3e} over {args.params} parameters (eps={args.eps})")
    return 0 if err <= 1e-3 else 1


def cmd_serve(args: argparse.Namespace, cfg: dict) -> int:
    import uvicorn

    from .service import create_app, load_state

    if args.data_dir is None:
        raise ValueError("--data-dir (or UGS_DATA_DIR) is required")
    state = load_state(args.data_dir)
    app = create_app(state)
    print(f"serving {len(state.labels)} images from {args.data_dir} on {args.host}:{cfg['port']}")
    uvicorn.run(app, host=args.host, port=cfg["port"], log_level="warning")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "gen-labels": cmd_gen_labels,
    "eval-noc": cmd_eval_noc,
    "eval-ar": cmd_eval_ar,
    "train-toy": cmd_train_toy,
    "gradcheck": cmd_gradcheck,
    "serve": cmd_serve,
}


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage()
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage()
        return 2
    try:
        cfg = resolve_config(args)
        _echo(cfg)
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - converted to machine-readable output
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
