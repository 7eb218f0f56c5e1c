"""Scenario configs and the end-to-end pipeline."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import statistics
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .assoc import AssociationResult, associate_frame, write_association_log
from .baseline import jda_associate_frame
from .config import (
    METHODS,
    PRESETS,
    ConfigError,
    EngineConfig,
    JDAWeights,
    ReferenceCriteria,
    deep_merge,
    from_dict,
    load_json,
    to_dict,
)
from .evaluate import (
    association_errors,
    bench_timing,
    eval_construction,
    eval_loops,
    keyframe_reference,
)
from .loopdet import ConsistencyTracker, LoopDecision, detect_loop, write_loop_log
from .mapdb import Frame, MapDatabase
from .sim import SceneSpec, SimOutput, simulate, write_stream


@dataclass
class Scenario:
    name: str = "scenario"
    scene: SceneSpec = field(default_factory=SceneSpec)
    engine: EngineConfig = field(default_factory=EngineConfig)
    jda: JDAWeights = field(default_factory=JDAWeights)
    reference: ReferenceCriteria = field(default_factory=ReferenceCriteria)
    methods: list[str] = field(default_factory=lambda: ["mlv"])
    seeds: list[int] = field(default_factory=list)
    detect_loops: bool = True
    r_match: float = 0.5
    loop_tolerance: int = 2
    timing: bool = False
    timing_repeats: int = 3

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}", "methods")

    def seed_list(self) -> list[int]:
        return list(self.seeds) or [self.scene.seed]

    def with_seed(self, seed: int) -> SceneSpec:
        return dataclasses.replace(self.scene, seed=seed)


def bundled_scenarios() -> list[str]:
    root = resources.files("objslam") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scenario(source: str, preset: Optional[str] = None, overrides: Optional[dict] = None) -> Scenario:
    """Load from a JSON path or a bundled scenario name."""
    path = Path(source)
    if path.exists():
        data = load_json(path)
    else:
        res = resources.files("objslam") / "scenarios" / f"{source}.json"
        if not res.is_file():
            raise ConfigError(f"no config file or bundled scenario named {source!r}", "config")
        data = json.loads(res.read_text())
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}", "preset")
        data = deep_merge(data, PRESETS[preset])
    if overrides:
        data = deep_merge(data, overrides)
    return from_dict(Scenario, data)


def run_id(scene: SceneSpec) -> str:
    return hashlib.sha256(json.dumps(scene.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunResult:
    method: str
    db: MapDatabase
    associations: list[AssociationResult]
    loops: list[LoopDecision]

    def records(self) -> list[dict]:
        return [r.to_record() for r in self.associations]

    def loop_records(self) -> list[dict]:
        return [d.to_record() for d in self.loops]


def run_pipeline(sim: SimOutput, engine: EngineConfig, method: str = "mlv",
                 jda: Optional[JDAWeights] = None, detect_loops: bool = True,
                 frames: Optional[list[Frame]] = None) -> RunResult:
    """Associate every frame and query loops on each new keyframe."""
    config = engine.for_method(method)
    db = MapDatabase(sim.intrinsics, config, sim.points)
    tracker = ConsistencyTracker(config.n_consist)
    results, decisions = [], []
    for frame in frames if frames is not None else sim.frames:
        if method == "jda":
            r = jda_associate_frame(frame, db, jda, config)
        else:
            r = associate_frame(frame, db, config)
        results.append(r)
        if detect_loops and r.keyframe:
            d = detect_loop(db.keyframes[frame.frame_id], db, tracker, config)
            if d is not None:
                decisions.append(d)
    return RunResult(method, db, results, decisions)


def evaluate_run(run: RunResult, sim: SimOutput, scenario: Scenario) -> dict:
    records = run.records()
    report = {
        "method": run.method,
        "construction": eval_construction(run.db, sim.objects, sim.truth, scenario.r_match).to_dict(),
        "association": association_errors(records, sim.truth),
        "landmarks": len(run.db.landmarks),
    }
    if scenario.detect_loops:
        ids, ref = keyframe_reference(records, sim.truth, scenario.reference)
        report["loops"] = eval_loops(run.loop_records(), ids, ref, scenario.loop_tolerance).to_dict()
    return report


def timing_report(sim: SimOutput, scenario: Scenario, methods: list[str]) -> dict:
    # warm caches and imports on a short prefix before timing
    for m in methods:
        run_pipeline(sim, scenario.engine, m, scenario.jda, False, sim.frames[:20])

    def replay(m: str) -> list[float]:
        run = run_pipeline(sim, scenario.engine, m, scenario.jda, False)
        return [r.elapsed_us for r in run.associations]

    return bench_timing(replay, methods, scenario.timing_repeats).to_dict()


def write_run(run: RunResult, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_association_log(run.associations, directory / "assoc.jsonl")
    write_loop_log(run.loops, directory / "loops.jsonl")
    run.db.save(directory / "map.json")


def summarize(per_seed: dict) -> dict:
    """Median construction F per method across seeds."""
    methods: dict[str, list[float]] = {}
    for reports in per_seed.values():
        for m, rep in reports.items():
            methods.setdefault(m, []).append(rep["construction"]["f_measure"])
    return {m: {"median_f": statistics.median(v), "f": v} for m, v in methods.items()}


def run_scenario(scenario: Scenario, out_dir: Optional[Path] = None) -> dict:
    """Simulate, associate with each method, detect loops, evaluate; write
    artifacts under ``out_dir`` when given."""
    per_seed: dict[str, dict] = {}
    timing = {}
    for seed in scenario.seed_list():
        sim = simulate(scenario.with_seed(seed))
        rid = run_id(sim.scene)
        seed_dir = Path(out_dir) / f"seed_{seed}" if out_dir is not None else None
        if seed_dir is not None:
            write_stream(sim, seed_dir)
            (seed_dir / "run.json").write_text(json.dumps({"run_id": rid, "seed": seed}))
        reports = {}
        for m in scenario.methods:
            run = run_pipeline(sim, scenario.engine, m, scenario.jda, scenario.detect_loops)
            reports[m] = evaluate_run(run, sim, scenario)
            if seed_dir is not None:
                write_run(run, seed_dir / m)
                (seed_dir / m / "run.json").write_text(json.dumps({"run_id": rid, "method": m}))
        per_seed[str(seed)] = reports
        if scenario.timing and not timing:
            timing = timing_report(sim, scenario, scenario.methods)
    out = {"scenario": scenario.name, "config": to_dict(scenario), "seeds": per_seed,
           "summary": summarize(per_seed)}
    if timing:
        out["timing"] = timing
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "reports.json").write_text(json.dumps(out, indent=1))
    return out
