"""Run one of the desk-scale synthetic experiments and print its metrics as JSON.

    python scripts/desk_experiments.py overfit
    python scripts/desk_experiments.py trend --epochs 50
    python scripts/desk_experiments.py adaptation
    python scripts/desk_experiments.py sweep --counts 0,10,50,100
"""
import argparse
import json
from dataclasses import replace

from landmark_da import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("which", choices=("overfit", "trend", "adaptation", "sweep"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="defaults differ per experiment")
    p.add_argument("--width-scale", type=float)
    p.add_argument("--counts", default="0,10,50,100")
    p.add_argument("--out", help="also write the metrics JSON here")
    args = p.parse_args()

    cfg = replace(ex.DESK_CONFIG, seed=args.seed)
    if args.epochs:
        cfg = replace(cfg, epochs=args.epochs)
    if args.width_scale:
        cfg = replace(cfg, width_scale=args.width_scale)
    setup = ex.DomainSetup(seed=args.seed)

    if args.which == "overfit":
        result = ex.overfit(args.seed, steps=args.epochs or 2000, width_scale=args.width_scale or 0.25)
    elif args.which == "trend":
        result = ex.reconstruction_trend(args.seed, epochs=args.epochs or 50, width_scale=args.width_scale or 0.25)
        result.metrics.pop("l_rec")
    elif args.which == "adaptation":
        result = ex.adaptation(cfg, setup)
    else:
        counts = [int(c) for c in args.counts.split(",")]
        result = ex.sweep(cfg, setup, counts)
        result.metrics.pop("json")

    text = json.dumps(result.metrics, indent=2, sort_keys=True)
    print(text)
    print(f"seconds {result.seconds:.1f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
