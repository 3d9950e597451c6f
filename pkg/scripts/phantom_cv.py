#!/usr/bin/env python3
"""Cross-validate both heads on a small phantom and check Grad-CAM localization.

This is the desk-scale profile used by the acceptance suite.  Two subjects at
64x64 keep a full 5-fold run (skill + five force heads per subject) to around
twenty minutes on one core.
"""
import argparse
import logging
import time

import numpy as np

from usforce import data as D
from usforce import interpretability as I
from usforce import metrics
from usforce import model as M
from usforce import training as Tr

PROFILE = dict(subjects=2, image_size=64, frames_per_skill=1000, seed=7,
               channels=(4, 8, 8, 16, 16), batch_size=8, iterations_per_fold=1)


def blob_hit_rate(dataset, models, folds=5, min_force=2.0):
    """Fraction of high-force test frames whose weighted Grad-CAM peak lands on a blob."""
    hits = total = 0
    for (subject, skill, fold), params in models.items():
        rec = dataset.recording(subject, skill)
        _, te = D.fold_indices(len(rec), fold - 1, folds)
        mask = D.blob_mask(rec, dataset.manifest.image_size)
        for i in te[rec.forces[te] > min_force]:
            hm = I.weighted_multilayer_gradcam(params, rec.frames[i], skill=skill)
            hits += bool(mask[hm.peak()])
            total += 1
    return hits, total


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=PROFILE["subjects"])
    ap.add_argument("--frames-per-skill", type=int, default=PROFILE["frames_per_skill"])
    ap.add_argument("--iterations", type=int, default=PROFILE["iterations_per_fold"])
    ap.add_argument("--seed", type=int, default=PROFILE["seed"])
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    t0 = time.perf_counter()
    ds = D.synth_generate(args.subjects, image_size=PROFILE["image_size"], seed=args.seed,
                          frames_per_skill=args.frames_per_skill)
    arch = M.ArchitectureConfig(PROFILE["image_size"], PROFILE["image_size"], PROFILE["channels"])
    common = dict(batch_size=PROFILE["batch_size"], iterations_per_fold=args.iterations, seed=args.seed)

    skill = Tr.run_cross_validation(ds, Tr.TrainConfig("skill", **common), arch)
    print(f"skill  test accuracy {metrics.overall(skill).mu_test:.2f} % "
          f"({time.perf_counter() - t0:.0f} s)")

    kept = {}

    def keep(rec, params):
        if rec.iteration == 1:
            kept[(rec.subject, rec.skill, rec.fold)] = params

    force = Tr.run_cross_validation(ds, Tr.TrainConfig("force", **common), arch, on_model=keep)
    print(metrics.summary_tsv(metrics.aggregate(force, "skill"), with_percent=True), end="")
    print(f"force  test RMSE {metrics.overall(force).mu_test:.3f} N "
          f"({time.perf_counter() - t0:.0f} s)")

    hits, total = blob_hit_rate(ds, kept)
    print(f"gradcam peak on blob: {hits}/{total} = {100 * hits / max(total, 1):.1f} %")
    print(f"total {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
