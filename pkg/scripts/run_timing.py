"""Per-frame association time of MLV and the Hungarian baseline as the map grows."""
import argparse

from objslam.runner import load_scenario, run_pipeline, timing_report
from objslam.sim import simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="growing")
    ap.add_argument("--repeats", type=int, default=None)
    args = ap.parse_args()
    sc = load_scenario(args.config)
    if args.repeats:
        sc.timing_repeats = args.repeats
    sim = simulate(sc.scene)
    built = len(run_pipeline(sim, sc.engine, "mlv", detect_loops=False).db.landmarks)
    stages = timing_report(sim, sc, sc.methods)["stages"]
    print(f"landmarks after {len(sim.frames)} frames: {built}")
    keys = sorted({k for v in stages.values() for k in v}, key=int)
    print(f"{'method':>6} " + " ".join(f"{k + '-stage ms':>14}" for k in keys) + "   last/first")
    for m, v in stages.items():
        print(f"{m:>6} " + " ".join(f"{v[k]:14.3f}" for k in keys) + f"   {v[keys[-1]] / v[keys[0]]:.2f}")


if __name__ == "__main__":
    main()
