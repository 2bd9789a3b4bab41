"""Run the shipped response-time experiment and print it next to the reported numbers."""
import argparse

from gslb.cli import run_sim
from gslb.scenario import parse_scenario

REPORTED = {
    "Round Robin": 90.889,
    "Weighted Least Connection": 94.116,
    "Weighted Least Connection + Weighted Least Connection": 47.923,
    "Weighted Least Connection + Round Robin": 54.614,
    "Round Robin + Round Robin": 63.259,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="table3.scenario")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    doc, problems = run_sim(parse_scenario(args.scenario), args.seed)
    print(doc.text())
    print(f"{'algorithm':<56}{'sim total':>10}{'reported':>10}{'sim/WLC':>9}{'rep/WLC':>9}")
    by = {r.algorithm: r.report.total_time for r in doc.rows}
    base_sim, base_rep = by["Weighted Least Connection"], REPORTED["Weighted Least Connection"]
    for alg, rep in REPORTED.items():
        sim = by.get(alg)
        if sim is None:
            continue
        print(f"{alg:<56}{sim:>10.3f}{rep:>10.3f}{sim / base_sim:>9.2f}{rep / base_rep:>9.2f}")
    for p in problems:
        print("self-check:", p)


if __name__ == "__main__":
    main()
