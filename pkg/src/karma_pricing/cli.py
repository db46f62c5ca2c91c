"""Command-line entry point: ``karma-pricing {run,solve,check}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .env import InvariantError
from .experiment import ScenarioError, bundled_scenarios, compare_solvers, load_scenario, run


def _fmt(v):
    return "[" + ", ".join(f"{x:.4f}" for x in v) + "]"


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    res = run(scenario, seed=args.seed, days=args.days, out=args.out,
              checkpoints=args.checkpoints)
    if not args.quiet:
        s = res.summary
        print(f"{scenario.name} seed={res.seed} days={s['days']}")
        for seg in s["segments"]:
            print(f"  days {seg['first_day']}-{seg['last_day']}: converged on day "
                  f"{seg['convergence_day']}, post-convergence gap {seg['post_convergence_gap']}")
        print(f"  C_MA5 above uncontrolled on {s['days_ma5_above_uc']} days, "
              f"saving {s['total_saving']:.3f}")
        if args.out:
            print(f"  log and summary written to {args.out}")
    return 0


def cmd_solve(args) -> int:
    scenario = load_scenario(args.scenario)
    report = compare_solvers(scenario)
    if args.out:
        from pathlib import Path

        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"{scenario.name}_flows.json").write_text(json.dumps(report, indent=2))
    if not args.quiet:
        for row in report:
            print(f"{scenario.name} segment {row['segment']} (from day {row['first_day']})")
            for key in ("x_star", "x_uc"):
                line = f"  {key:7s} {_fmt(row[key])}"
                if f"{key}_reference" in row:
                    line += (f"  reference {_fmt(row[f'{key}_reference'])}"
                             f"  max dev {row[f'{key}_max_deviation']:.4f}")
                print(line)
            print(f"  costs: optimum {row['cost_optimum']:.4f}, uncontrolled "
                  f"{row['cost_uncontrolled']:.4f}, relative gap {100 * row['relative_gap']:.2f}%")
    return 0


def cmd_check(args) -> int:
    from .acceptance import run_checks

    results = run_checks(seeds=args.seeds, out=args.out, days=args.days, jobs=args.jobs,
                         reuse=args.reuse, quick=args.quick,
                         scenarios=[args.scenario] if args.scenario else None,
                         first_seed=args.seed)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="karma-pricing", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    names = ", ".join(bundled_scenarios())

    def common(sp, scenario_required=True):
        sp.add_argument("--scenario", required=scenario_required,
                        help=f"scenario file or bundled name ({names})")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--quiet", action="store_true")

    r = sub.add_parser("run", help="run one seeded learning episode")
    common(r)
    r.add_argument("--seed", type=int, help="RNG seed (defaults to the scenario's)")
    r.add_argument("--days", type=int, help="override the episode length")
    r.add_argument("--checkpoints", action="store_true",
                   help="save GP, policy and data at every update")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("solve", help="solve the flow references of a scenario")
    common(s)
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("check", help="run the acceptance suite")
    common(c, scenario_required=False)
    c.add_argument("--seeds", type=int, default=20, help="seeds per learning sweep")
    c.add_argument("--seed", type=int, default=0, help="first seed of the sweeps")
    c.add_argument("--days", type=int, help="override episode lengths")
    c.add_argument("--jobs", type=int, default=1, help="parallel episodes")
    c.add_argument("--reuse", action="store_true",
                   help="reuse episode summaries already present in --out")
    c.add_argument("--quick", action="store_true", help="skip the learning sweeps")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    for noisy in ("jax", "absl"):
        logging.getLogger(noisy).setLevel(logging.WARNING)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
