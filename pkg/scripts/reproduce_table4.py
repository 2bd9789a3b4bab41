"""Run the shipped finished-requests experiment (scaled duration) and compare orderings."""
import argparse

from gslb.cli import run_sim
from gslb.scenario import parse_scenario

REPORTED = {
    "Round Robin": 655,
    "Weighted Least Connection": 608,
    "Weighted Least Connection + Weighted Least Connection": 721,
    "Weighted Least Connection + Round Robin": 673,
    "Round Robin + Round Robin": 707,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="table4.scenario")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    doc, problems = run_sim(parse_scenario(args.scenario), args.seed)
    print(doc.text())
    by = {r.algorithm: r.report.total_requests for r in doc.rows}
    print(f"{'algorithm':<56}{'sim':>6}{'reported (300 s)':>18}")
    for alg, rep in REPORTED.items():
        print(f"{alg:<56}{by.get(alg, '-'):>6}{rep:>18}")
    for p in problems:
        print("self-check:", p)


if __name__ == "__main__":
    main()
