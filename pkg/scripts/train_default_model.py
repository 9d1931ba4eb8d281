"""Rebuild the bundled depth model from the training pictures.

Collects reference maps from exhaustive encodes of one panning clip per
training picture at the four standard Qps, trains with the default schedule
and writes the weights next to the package.

    python scripts/train_default_model.py [--out PATH] [--dataset PATH]
"""

import argparse
import time
from pathlib import Path

from qtmtfast import corpus, ddff
from qtmtfast.bench import collect_samples
from qtmtfast.metrics import DEFAULT_QPS

DEFAULT_OUT = Path(__file__).resolve().parent.parent / "src" / "qtmtfast" / "data" / "default.ddff"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(DEFAULT_OUT))
    ap.add_argument("--dataset", default=None, help="also write the collected dataset here")
    ap.add_argument("--frames", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.perf_counter()
    clips = corpus.training_clips(frames=args.frames)
    maps, labels = collect_samples(clips, DEFAULT_QPS)
    print(f"collected {len(labels)} samples in {time.perf_counter() - t0:.1f}s")
    if args.dataset:
        ddff.write_dataset(args.dataset, maps, labels)

    t0 = time.perf_counter()
    res = ddff.train(maps.astype(float), labels, seed=args.seed)
    print(f"trained in {time.perf_counter() - t0:.1f}s: train acc {res.train_accuracy:.4f}, "
          f"test acc {res.test_accuracy:.4f}")
    ddff.save_model(args.out, res.model)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
