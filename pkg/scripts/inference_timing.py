"""Inference wall time against the number of grid prompts.

    python scripts/inference_timing.py --points 10 50 100 --size 256

Uses the intensity reference model on procedural fixtures. Reports the median
per-image time and its ratio to the smallest N, next to the linear bound.
"""

import argparse
import statistics
import time

from foamfed.dataset import synth_generate
from foamfed.inference import InferenceConfig, segment_foam
from foamfed.model import init_params


def intensity_model():
    p = init_params()
    p["w"][0], p["b"][0] = 40.0, -20.4
    return p


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, nargs="+", default=[10, 50, 100])
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--images", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    fixtures = synth_generate(args.images, (args.size, args.size), seed=77, noise=6.0)
    params = intensity_model()
    segment_foam(fixtures[0].image, params)  # warm-up

    medians = {}
    for n in sorted(args.points):
        cfg = InferenceConfig(n_points=n)
        samples = []
        for _ in range(args.repeats):
            for s in fixtures:
                t0 = time.perf_counter()
                segment_foam(s.image, params, cfg)
                samples.append(time.perf_counter() - t0)
        medians[n] = statistics.median(samples)

    base_n = min(medians)
    print(f"{args.images} images at {args.size}x{args.size}, {args.repeats} repeats")
    print("| N | median ms | ratio | linear bound |")
    print("|---|---|---|---|")
    for n, t in medians.items():
        print(f"| {n} | {1e3 * t:.1f} | {t / medians[base_n]:.2f} | {n / base_n:.1f} |")
    ok = all(t / medians[base_n] <= n / base_n for n, t in medians.items())
    print("at most linear" if ok else "SUPER-LINEAR growth observed")


if __name__ == "__main__":
    main()
