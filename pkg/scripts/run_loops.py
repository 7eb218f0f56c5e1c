"""Loop detection precision/recall on the loop and aliasing scenes."""
import argparse

from objslam.runner import evaluate_run, load_scenario, run_pipeline
from objslam.sim import simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--configs", nargs="+", default=["loop", "aliasing", "drift"])
    args = ap.parse_args()
    for name in args.configs:
        sc = load_scenario(name)
        for seed in sc.seed_list():
            sim = simulate(sc.with_seed(seed))
            run = run_pipeline(sim, sc.engine, "mlv", sc.jda, True)
            r = evaluate_run(run, sim, sc)["loops"]
            fixed = sum(1 for d in run.loops if d.closure is not None and d.closure.corrected)
            prec = "n/a" if r["precision"] is None else f"{r['precision']:.3f}"
            print(f"{name} seed {seed}: detected {r['detected']} true {r['true_positives']} "
                  f"reference {r['reference_loops']} precision {prec} recall {r['recall']:.3f} "
                  f"corrections {fixed}")


if __name__ == "__main__":
    main()
