#!/usr/bin/env python3
"""Search conv widths for a target skill-model size and print the best fit."""
import argparse

from usforce import model as M


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--target", type=int, default=67_525, help="trainable parameters of the skill model")
    ap.add_argument("--dense-units", type=int, default=16)
    ap.add_argument("--size", type=int, default=500, help="square input side")
    args = ap.parse_args()

    res = M.search_channel_config(args.target, args.dense_units, args.size, args.size)
    if res.config is not None:
        print(f"exact: {res.config.channels}")
    else:
        print(f"no exact hit; nearest {res.nearest.channels} -> {res.nearest_count} (gap {res.gap})")
    for head in M.HEADS:
        cfg = res.config or res.nearest
        trainable, non_trainable = M.count_parameters(M.build_model(cfg, head, 0))
        print(f"{head:5s} trainable {trainable:6d}  non-trainable {non_trainable}")


if __name__ == "__main__":
    main()
