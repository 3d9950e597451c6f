#!/usr/bin/env python3
"""Time paced skill -> force inference on full-size frames with untrained models."""
import argparse

import numpy as np

from usforce import data as D
from usforce import model as M
from usforce import stream as S


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=100)
    ap.add_argument("--size", type=int, default=500)
    ap.add_argument("--rate-hz", type=float, default=D.RATE_HZ)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    arch = M.ArchitectureConfig(args.size, args.size)
    skill = M.build_model(arch, "skill", args.seed)
    force = {k: M.build_model(arch, "force", args.seed + 1 + k) for k in range(M.NUM_SKILLS)}
    rng = np.random.default_rng(args.seed)
    frames = [rng.random((args.size, args.size, 1), dtype=np.float32) for _ in range(args.frames)]

    rep = S.run_stream(skill, force, frames, rate_hz=args.rate_hz)
    print(rep.summary_text())
    s = rep.summary()
    print(f"max latency: skill {s['max_skill_ms']:.1f} ms, force {s['max_force_ms']:.1f} ms; "
          f"late frames {s['late_frames']}")


if __name__ == "__main__":
    main()
