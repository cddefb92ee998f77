"""Acceptance-style decoder evaluation used during bring-up.

Trains on the standard synthetic corpus, then reports held-out 1-IoU at
oracle granularity (initial-click protocol) and the fraction of adjacent
sweep pairs with non-decreasing predicted area.
"""

import sys
import time

import numpy as np

from granseg.decoder import TrainConfig, build_training_corpus, decode, save_checkpoint, train_toy
from granseg.evaluation import initial_click
from granseg.features import PatchFeatureMap
from granseg.hierarchy import granularity_scores


def heldout_eval(model, corpus, cfg):
    image_ids = sorted({s.image_id for s in corpus})
    n_val = max(1, int(len(image_ids) * cfg.val_fraction))
    val_ids = set(image_ids[len(image_ids) - n_val :])
    per_image = {}
    for s in corpus:
        per_image.setdefault(s.image_id, []).append(s)
    ious = []
    mono_ok = mono_all = 0
    for iid in sorted(val_ids):
        samples = per_image[iid]
        fmap = PatchFeatureMap(
            data=samples[0].features.reshape(cfg.grid, cfg.grid, cfg.feature_dim).copy(),
            normalized=True,
        )
        seen = {}
        for s in samples:
            seen.setdefault(s.target.tobytes(), s.target.reshape(cfg.grid, cfg.grid))
        masks = sorted(seen.values(), key=lambda m: -m.sum())
        gs = granularity_scores([int(m.sum()) for m in masks])
        for m, g in zip(masks, gs):
            c = initial_click(m)
            pred = decode(fmap, (c.x, c.y), g, model) > 0
            union = (pred | m).sum()
            ious.append(((pred & m).sum() / union) if union else 0.0)
        c = initial_click(masks[-1])
        prev = -1
        for k in range(1, 11):
            area_k = int((decode(fmap, (c.x, c.y), k / 10.0, model) > 0).sum())
            if prev >= 0:
                mono_all += 1
                mono_ok += int(area_k >= prev)
            prev = area_k
    return float(np.mean(ious)), mono_ok / mono_all, len(ious)


if __name__ == "__main__":
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 100
    cfg = TrainConfig(epochs=epochs, seed=0)
    corpus = build_training_corpus(200, cfg, seed=0)
    print(f"corpus: {len(corpus)} samples", flush=True)
    t0 = time.time()
    model, metrics = train_toy(corpus, cfg)
    print(f"train {time.time() - t0:.0f}s", flush=True)
    for r in metrics[:: max(1, epochs // 8)] + [metrics[-1]]:
        print(r["epoch"], round(r["train_loss"], 4), round(r["val_one_iou"], 4), flush=True)
    mean_iou, mono, n = heldout_eval(model, corpus, cfg)
    print(f"heldout masks={n} oracle-g 1-IoU={mean_iou:.4f} monotone={mono:.3f}")
    if len(sys.argv) > 2:
        save_checkpoint(model, sys.argv[2])
