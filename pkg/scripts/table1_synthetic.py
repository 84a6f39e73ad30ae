"""Two-step model vs source-only ConvNet on the synthetic target domain.

Both models see the same labeled source faces; the two-step model also
reconstructs unlabeled target faces. Scored on a held-out labeled target split.

    python scripts/table1_synthetic.py --epochs 30 --width-scale 0.1
"""
import argparse
import json
from dataclasses import replace

from landmark_da.experiments import DESK_CONFIG, DomainSetup, adaptation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=DESK_CONFIG.epochs)
    p.add_argument("--batch-size", type=int, default=DESK_CONFIG.batch_size)
    p.add_argument("--width-scale", type=float, default=DESK_CONFIG.width_scale)
    p.add_argument("--lr", type=float, default=DESK_CONFIG.learning_rate)
    p.add_argument("--n-source", type=int, default=500)
    p.add_argument("--n-target", type=int, default=500)
    p.add_argument("--n-pool", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the metrics as JSON here")
    args = p.parse_args()

    cfg = replace(DESK_CONFIG, epochs=args.epochs, batch_size=args.batch_size,
                  width_scale=args.width_scale, learning_rate=args.lr)
    setup = DomainSetup(args.n_source, args.n_target, args.n_pool, seed=args.seed)
    result = adaptation(cfg, setup)
    for mode, m in result.metrics.items():
        print(mode, json.dumps(m), flush=True)
    print(f"seconds {result.seconds:.1f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result.metrics, fh, indent=2)


if __name__ == "__main__":
    main()
