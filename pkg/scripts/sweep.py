"""Run (or reload) a seed sweep for one scenario and print a per-seed table.

    python scripts/sweep.py three_arc --seeds 20 --out results/sweeps --reuse
"""
import argparse
import logging
import statistics

from karma_pricing.acceptance import sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("scenario")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--days", type=int)
    ap.add_argument("--out", default="results/sweeps")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--reuse", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logging.getLogger("jax").setLevel(logging.WARNING)

    seeds = range(args.first_seed, args.first_seed + args.seeds)
    records = sweep(args.scenario, seeds, days=args.days, out=args.out,
                    jobs=args.jobs, reuse=args.reuse)
    print(f"{'seed':>4} {'segment':>7} {'conv':>5} {'to_conv':>7} {'gap%':>7} "
          f"{'ma5>uc':>6} {'saving':>8} {'sec':>5}")
    saving = []
    for rec in records:
        s = rec["summary"]
        if s is None:
            print(f"{rec['seed']:>4} invariant error: {rec['invariant_error']}")
            continue
        saving.append(s["total_saving"])
        for i, seg in enumerate(s["segments"]):
            gap = seg["post_convergence_gap"]
            print(f"{rec['seed']:>4} {i:>7} {str(seg['convergence_day']):>5} "
                  f"{str(seg['days_to_convergence']):>7} "
                  f"{'-' if gap is None else f'{100 * gap:.3f}':>7} "
                  f"{s['days_ma5_above_uc']:>6} {s['total_saving']:>8.3f} {rec['seconds']:>5.0f}")
    if saving:
        print(f"median total saving {statistics.median(saving):.3f} over {len(saving)} episodes")


if __name__ == "__main__":
    main()
