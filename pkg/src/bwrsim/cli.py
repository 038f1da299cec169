"""``bwr-sim`` command line: run one scenario, sweep loads, or recompute gain tables."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ScenarioConfig, apply_settings, load_config, parse_text
from .workload import (LatencyStats, arm_config, check_invariants, export_results,
                       run_ping_experiment, summarize, write_gain_csv)

log = logging.getLogger("bwrsim")

OUTPUT_ENV = "BWRSIM_OUTPUT"
DEFAULT_LOADS = (0.0, 0.08, 0.2, 0.35, 0.5, 0.7)
ARMS = ("baseline", "bwr")


def run_stem(load: float, seed: int, arm: str) -> str:
    return f"load{load:.3f}_seed{seed}_{arm}"


def _output_root(arg: Optional[str]) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ENV) or "results")


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    if args.set:
        cfg = apply_settings(cfg, parse_text("\n".join(args.set)))
    if getattr(args, "trace", False):
        cfg = cfg.replace(run={"trace": True})
    return cfg


def _sweep_job(job):
    cfg, load, seed, arm, outdir = job
    stem = run_stem(load, seed, arm)
    try:
        result = run_ping_experiment(arm_config(cfg, load, seed, arm == "bwr"))
        problems = check_invariants(result)
        export_results(result, outdir, stem)
        # annotate the summary so `compare` can rebuild the table
        summary = Path(outdir) / f"{stem}.json"
        data = json.loads(summary.read_text())
        data.update({"load": load, "seed": seed, "arm": arm, "violations": problems})
        summary.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return stem, "ok" if not problems else "assertion-failed", result.stats, problems
    except Exception as exc:    # one failed run must not sink the sweep
        return stem, "error", None, [f"{type(exc).__name__}: {exc}"]


def cmd_run(args) -> int:
    cfg = _load(args)
    outdir = _output_root(args.output)
    result = run_ping_experiment(cfg)
    files = export_results(result, outdir, args.name)
    problems = check_invariants(result)
    s = result.stats
    print(f"pings completed     {s.count}")
    print(f"mean RTT            {s.rtt.mean:.3f} ms")
    print(f"LTE uplink          {s.lte_uplink.mean:.3f} ms")
    print(f"DOCSIS segment      {s.docsis_segment_mean:.3f} ms")
    print(f"CM queue wait       {s.cm_wait.mean:.3f} ms (max {s.cm_wait.max:.3f})")
    print(f"wasted JIT bytes    {s.jit_wasted_bytes} / {s.jit_granted_bytes}")
    for f in files:
        print(f"wrote {f}")
    for p in problems:
        print(f"ASSERTION FAILED: {p}", file=sys.stderr)
    return 1 if problems else 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    loads = [float(x) for x in args.loads.split(",")] if args.loads else list(DEFAULT_LOADS)
    for load in loads:
        if not 0.0 <= load <= 0.9:
            print(f"error: load {load} outside [0, 0.9]", file=sys.stderr)
            return 2
    seeds = list(range(args.seed_base, args.seed_base + args.seeds))
    root = _output_root(args.output)
    rundir = root / "runs"
    rundir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, load, seed, arm, str(rundir))
            for load in loads for seed in seeds for arm in ARMS]
    workers = args.workers or os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_job, jobs))
    else:
        outcomes = [_sweep_job(j) for j in jobs]
    results = {}
    manifest = []
    for (c, load, seed, arm, _), (stem, status, stats, problems) in zip(jobs, outcomes):
        manifest.append({"run": stem, "load": load, "seed": seed, "arm": arm,
                         "status": status, "problems": problems})
        if stats is not None:
            results[(load, seed, arm)] = stats
        if status != "ok":
            log.error("%s: %s %s", stem, status, "; ".join(problems))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    complete = {k: v for k, v in results.items()
                if (k[0], k[1], "baseline") in results and (k[0], k[1], "bwr") in results}
    rows = summarize(complete) if complete else []
    write_gain_csv(rows, root / "gain.csv")
    for r in rows:
        print(f"load {r.load:.2f}: baseline {r.baseline_docsis_ms:.2f} ms, "
              f"bwr {r.bwr_docsis_ms:.2f} ms, gain {100 * r.gain:.1f}%")
    print(f"wrote {root / 'gain.csv'}")
    return 0 if all(m["status"] == "ok" for m in manifest) else 1


def load_results(root: Path) -> dict:
    rundir = root / "runs"
    if not rundir.is_dir():
        raise FileNotFoundError(f"no runs/ directory under {root}")
    results = {}
    for path in sorted(rundir.glob("*.json")):
        data = json.loads(path.read_text())
        if "arm" not in data:
            continue
        results[(data["load"], data["seed"], data["arm"])] = LatencyStats.from_dict(data["stats"])
    return results


def cmd_compare(args) -> int:
    root = Path(args.results)
    try:
        results = load_results(root)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not results:
        print(f"error: no run summaries under {root / 'runs'}", file=sys.stderr)
        return 2
    rows = summarize(results)
    out = Path(args.output) if args.output else root / "gain.csv"
    write_gain_csv(rows, out)
    for r in rows:
        print(f"load {r.load:.2f}: gain {100 * r.gain:.1f}%")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bwr-sim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="scenario file (section.key = value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one setting, e.g. --set bwr.enabled=false")
        p.add_argument("-o", "--output", help=f"output directory (default ${OUTPUT_ENV} or ./results)")
        p.add_argument("--trace", action="store_true", help="write per-event trace logs")

    p = sub.add_parser("run", help="run one scenario")
    common(p)
    p.add_argument("--name", default="run", help="file stem for outputs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="paired BWR off/on runs across loads and seeds")
    common(p)
    p.add_argument("--loads", help="comma-separated loads (default 0,0.08,0.2,0.35,0.5,0.7)")
    p.add_argument("--seeds", type=int, default=6, help="number of seeds per load")
    p.add_argument("--seed-base", type=int, default=1)
    p.add_argument("-j", "--workers", type=int, default=0, help="worker processes (default: all cores)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="rebuild the gain table from stored run summaries")
    p.add_argument("results", help="directory written by `sweep`")
    p.add_argument("-o", "--output", help="gain CSV path (default <results>/gain.csv)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
