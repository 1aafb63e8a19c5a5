#!/usr/bin/env python3
"""Whole toy pipeline in one run: synthesize data, train the full-completion
denoiser, evaluate best-of-k on held-out scenes, and print the report.

Mirrors the acceptance end-to-end criterion but with knobs exposed, so the
training budget / quality trade-off is easy to explore:

    python scripts/run_toy_pipeline.py --steps 3000 --pairs 2000 --out runs/toy
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from amodalkit import diffusion as D
from amodalkit import evalsuite, scenes
from amodalkit.graph import occluders_of, occlusion_percentage
from amodalkit.masks import apply_mask, iou

TOY_SCENE = scenes.SceneConfig(
    canvas=(32, 32), layer_range=(2, 2), size_range=(14, 24), textures=("solid",)
)


def collect_pairs(cfg, seed_base, want, max_occ):
    pairs, seed = [], seed_base
    while len(pairs) < want:
        sc = scenes.sample_scene(cfg, seed)
        g = scenes.derive_graph(sc)
        x = sc.composite()
        for k, layer in enumerate(sc.layers):
            iid = scenes.instance_id(k)
            if not occluders_of(g, iid):
                continue
            inst = g.instances[iid]
            if inst.modal.is_empty or occlusion_percentage(inst) > max_occ:
                continue
            pairs.append((x, inst.modal, apply_mask(layer.rgba, layer.amodal), None))
            if len(pairs) >= want:
                break
        seed += 1
    return pairs


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--held", type=int, default=128)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--lr", type=float, default=1.5e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-occlusion", type=float, default=0.45)
    ap.add_argument("--sample-steps", type=int, default=15)
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args()

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    tc = D.TrainConfig(
        steps=args.steps, batch=32, lr=args.lr, seed=args.seed,
        schedule="linear", t_min=20, log_csv=str(outdir / "curve.csv"),
    )
    codec = D.BlockCodec(tc.latent_factor)
    dcfg = tc.denoiser_config()

    print(f"collecting {args.pairs} training pairs ...")
    train_pairs = collect_pairs(TOY_SCENE, 0, args.pairs, args.max_occlusion)
    held = collect_pairs(TOY_SCENE, 1_000_000, args.held, args.max_occlusion)
    train_ex = [D.build_full_example(x, m, a, c, codec, dcfg) for x, m, a, c in train_pairs]
    held_ex = [D.build_full_example(x, m, a, c, codec, dcfg) for x, m, a, c in held]
    baseline = float(np.mean([iou(m, a.alpha_mask()) for _, m, a, _ in held]))

    print(f"training {tc.steps} steps ...")
    t0 = time.perf_counter()
    denoiser, history = D.train_toy(train_ex, "full", tc)
    train_s = time.perf_counter() - t0
    denoiser.save(outdir / "toy.dnz")

    print("sampling 8 variations per held-out instance ...")
    k_max = 8
    conds = np.repeat(np.stack([e.cond for e in held_ex]).astype(np.float64), k_max, axis=0)
    z = D.ddim_sample_batch(
        denoiser, conds, denoiser.sched, steps=args.sample_steps, eta=0.0,
        strength=1.0, rng=np.random.default_rng(42),
    )
    records = []
    for i, (x, m, a, c) in enumerate(held):
        preds = tuple(codec.decode_mask(z[i * k_max + k]) | m for k in range(k_max))
        records.append(
            evalsuite.EvalRecord(
                id=f"held{i}", predicted_variations=preds, gt_amodal=a.alpha_mask(),
                occlusion_pct=1.0 - m.area / a.alpha_mask().area,
            )
        )
    report = evalsuite.build_report(records, ks=(1, 2, 4, 8))
    report["modal_copy_baseline"] = baseline
    report["train_seconds"] = round(train_s, 1)
    report["final_train_loss"] = history[-1][1]
    evalsuite.write_report(report, outdir)
    print(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
