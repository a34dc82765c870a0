"""Synthesize a small dataset, train the miniature model, compare it with the scene-blind ablation.

    python demos/train_and_evaluate.py [--samples 600] [--epochs 3]
"""
import argparse
from dataclasses import replace

import numpy as np

from sgapgaze.data import SplitSpec, split_by_driver
from sgapgaze.synth import SynthConfig, generate_synthetic
from sgapgaze.training import TrainConfig, evaluate, prepare_synthetic, train

ap = argparse.ArgumentParser()
ap.add_argument("--samples", type=int, default=600)
ap.add_argument("--epochs", type=int, default=3)
args = ap.parse_args()

syn = generate_synthetic(0, args.samples, SynthConfig(samples_per_driver=50))
recs = [r for r, _ in syn]
drivers = sorted({r.driver_id for r in recs})
n_test = max(1, len(drivers) // 5)
spec = SplitSpec.ordered(drivers, len(drivers) - n_test, 0)
tr_r, _, te_r = split_by_driver(recs, spec)
images = {id(r): im for r, im in syn}

cfg = TrainConfig(epochs=args.epochs)
tr = prepare_synthetic([(r, images[id(r)]) for r in tr_r], cfg)
te = prepare_synthetic([(r, images[id(r)]) for r in te_r], cfg)
print(f"{len(tr)} train / {len(te)} test samples, drivers held out: {sorted(spec.test_drivers)}")

center = np.mean([np.hypot(*(s.pog - 0.5)) for s in te])
print(f"predict-the-centre baseline: {center:.4f}")
for name, c in (("full", cfg), ("scene-blind", replace(cfg, scene_blind=True))):
    res = train(tr, c)
    last = [r for r in res.curve if r["split"] == "train"][-1]
    rep = evaluate(te, res.params, c, train_drivers=sorted(spec.train_drivers))
    print(f"{name:12s} final train pog loss {last['loss_pog']:.4f}  "
          f"test mean normalized error {rep.mean_norm_error:.4f}  MPE {rep.mpe:.1f} px")
