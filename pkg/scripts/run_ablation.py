"""Construction precision/recall of the four association variants across seeds."""
import argparse
import json

from objslam.runner import load_scenario, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="ablation")
    ap.add_argument("--preset", default=None)
    ap.add_argument("--out", default=None, help="write streams, logs and reports here")
    args = ap.parse_args()
    rep = run_scenario(load_scenario(args.config, args.preset), args.out)
    print(f"{'method':>6} {'median F':>9}  per-seed F")
    for m, s in rep["summary"].items():
        print(f"{m:>6} {s['median_f']:9.3f}  " + " ".join(f"{f:.3f}" for f in s["f"]))
    for seed, reports in rep["seeds"].items():
        print(f"seed {seed}: " + json.dumps({m: r["construction"] for m, r in reports.items()}))


if __name__ == "__main__":
    main()
