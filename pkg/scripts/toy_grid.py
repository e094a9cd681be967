"""Run the desk-scale validation grid on the synthetic corpus and print per-cell F1.

    python3 scripts/toy_grid.py --out runs/toy-grid [--workers 2]
"""
import argparse
import time
from pathlib import Path

from litset.cli import run_grid
from litset.config import toy_grid_config


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="runs/toy-grid")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    args = parser.parse_args()

    cfg = toy_grid_config(args.out, args.seeds)
    cfg.workers = args.workers
    start = time.perf_counter()
    cells = run_grid(cfg, Path(args.out))
    print(f"{len(cells)} cells in {time.perf_counter() - start:.0f}s, written to {args.out}")
    for cell in cells:
        f1 = "  ".join(f"k={k}: {100 * v:5.1f}" for k, v in sorted(cell.mean_f1.items()))
        print(f"{cell.scheme:>8} {cell.n_labels:>3} labels  {f1}")


if __name__ == "__main__":
    main()
