"""Command-line entry point: simulate, associate, loop, eval, bench, run."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from .assoc import read_association_log
from .config import METHODS, PRESETS, ConfigError
from .evaluate import (
    InputError,
    association_errors,
    eval_construction,
    eval_loops,
    keyframe_reference,
)
from .loopdet import read_loop_log
from .mapdb import MapDatabase
from .runner import (
    Scenario,
    load_scenario,
    run_id,
    run_pipeline,
    run_scenario,
    timing_report,
    write_run,
)
from .sim import load_simulation, simulate, write_stream


def _scenario(args) -> Scenario:
    sc = load_scenario(args.config or "noiseless", args.preset)
    if args.seed is not None:
        sc.seeds = [args.seed]
        sc.scene.seed = args.seed
    if args.method is not None:
        sc.methods = [args.method]
    return sc


def _out(args) -> Path:
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1))


def cmd_simulate(args) -> dict:
    sc = _scenario(args)
    sim = simulate(sc.scene)
    out = _out(args)
    write_stream(sim, out)
    (out / "run.json").write_text(json.dumps({"run_id": run_id(sim.scene), "seed": sim.scene.seed}))
    return {"frames": len(sim.frames), "objects": len(sim.objects), "out": str(out)}


def _load_stream(args):
    if args.stream is None:
        raise InputError("--stream <dir> with frames.jsonl/scene.json is required")
    return load_simulation(args.stream)


def cmd_associate(args) -> dict:
    sc = _scenario(args)
    sim = _load_stream(args)
    method = args.method or "mlv"
    run = run_pipeline(sim, sc.engine, method, sc.jda, detect_loops=args.loops)
    out = _out(args)
    write_run(run, out)
    _copy_run_id(args.stream, out, method)
    return {"method": method, "landmarks": len(run.db.landmarks), "keyframes": len(run.db.keyframes),
            "loops_accepted": sum(d.accepted for d in run.loops), "out": str(out)}


def cmd_loop(args) -> dict:
    args.loops = True
    return cmd_associate(args)


def _copy_run_id(stream: str, out: Path, method: str) -> None:
    meta = Path(stream) / "run.json"
    if meta.exists():
        d = json.loads(meta.read_text())
        d["method"] = method
        (out / "run.json").write_text(json.dumps(d))


def _run_id(directory: Path) -> Optional[str]:
    p = Path(directory) / "run.json"
    return json.loads(p.read_text()).get("run_id") if p.exists() else None


def cmd_eval(args) -> dict:
    """Recompute reports from persisted logs."""
    sc = _scenario(args)
    sim = _load_stream(args)
    run_dir = Path(args.run or args.stream)
    ids = (_run_id(run_dir), _run_id(Path(args.stream)))
    if None not in ids and ids[0] != ids[1]:
        raise InputError(f"run {ids[0]} does not match stream {ids[1]}")
    records = read_association_log(run_dir / "assoc.jsonl")
    db = MapDatabase.load(run_dir / "map.json", sc.engine)
    report = {
        "construction": eval_construction(db, sim.objects, sim.truth, sc.r_match).to_dict(),
        "association": association_errors(records, sim.truth),
    }
    loop_path = run_dir / "loops.jsonl"
    if loop_path.exists():
        kf_ids, ref = keyframe_reference(records, sim.truth, sc.reference)
        report["loops"] = eval_loops(read_loop_log(loop_path), kf_ids, ref, sc.loop_tolerance).to_dict()
    return report


def cmd_bench(args) -> dict:
    sc = _scenario(args)
    sim = simulate(sc.scene)
    methods = [args.method] if args.method else ["mlv", "jda"]
    report = timing_report(sim, sc, methods)
    out = _out(args)
    (out / "timing.json").write_text(json.dumps(report, indent=1))
    return report


def cmd_run(args) -> dict:
    sc = _scenario(args)
    out = _out(args)
    report = run_scenario(sc, out)
    return {"scenario": report["scenario"], "summary": report["summary"], "out": str(out)}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario JSON path or bundled scenario name")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--preset", choices=sorted(PRESETS))

    p = argparse.ArgumentParser(prog="objslam", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a frame stream and ground truth")
    a = sub.add_parser("associate", parents=[common], help="associate a written stream")
    a.add_argument("--stream", help="directory written by `simulate`")
    a.add_argument("--loops", action="store_true", help="also run loop detection")
    lp = sub.add_parser("loop", parents=[common], help="associate and detect loops on a stream")
    lp.add_argument("--stream")
    e = sub.add_parser("eval", parents=[common], help="recompute reports from logs")
    e.add_argument("--stream")
    e.add_argument("--run", help="directory holding assoc.jsonl, loops.jsonl, map.json")
    sub.add_parser("bench", parents=[common], help="stage timing of MLV and JDA")
    sub.add_parser("run", parents=[common], help="end-to-end scenario run")
    return p


COMMANDS = {"simulate": cmd_simulate, "associate": cmd_associate, "loop": cmd_loop,
            "eval": cmd_eval, "bench": cmd_bench, "run": cmd_run}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _emit(COMMANDS[args.command](args))
        return 0
    except ConfigError as exc:
        _emit(exc.to_dict())
    except InputError as exc:
        _emit({"error": "input", "message": str(exc)})
    except (OSError, ValueError, KeyError) as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)})
    return 1


if __name__ == "__main__":
    sys.exit(main())
