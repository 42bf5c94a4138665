"""Recompute the evaluation metrics from a per-step export and compare.

usage: metric_oracle.py steps.csv metrics.csv [tolerance]
"""

import csv
import math
import sys
from collections import defaultdict


def population(xs):
    m = sum(xs) / len(xs)
    return m, math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def episodes(path):
    eps = defaultdict(lambda: {"a": [], "p": [], "r": [], "fell": False})
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            ep = eps[(row["terrain"], row["difficulty"], int(row["episode"]))]
            ep["a"].append([float(row[f"a{j}"]) for j in range(4)])
            ep["p"].append(sum(abs(float(row[f"tau{j}"]) * float(row[f"qd{j}"])) for j in range(4)))
            ep["r"].append(float(row["reward"]))
            ep["fell"] = row["fell"] == "true"
    return eps


def cells(eps):
    out = defaultdict(lambda: {"ret": [], "smooth": [], "energy": [], "ok": []})
    for (terrain, difficulty, _), ep in eps.items():
        c = out[(terrain, difficulty)]
        c["ret"].append(sum(ep["r"]))
        a = ep["a"]
        diffs = [math.sqrt(sum((x - y) ** 2 for x, y in zip(a[t], a[t - 1]))) for t in range(1, len(a))]
        c["smooth"].append(sum(diffs) / len(diffs) if diffs else 0.0)
        c["energy"].append(sum(ep["p"]) / len(ep["p"]))
        c["ok"].append(0.0 if ep["fell"] else 1.0)
    return out


def main():
    steps, metrics = sys.argv[1], sys.argv[2]
    tol = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-6
    table = cells(episodes(steps))
    worst = 0.0
    rows = 0
    with open(metrics, newline="") as f:
        for row in csv.DictReader(f):
            c = table[(row["terrain"], row["difficulty"])]
            want = {}
            want["return_mean"], want["return_std"] = population(c["ret"])
            want["smooth_mean"], want["smooth_std"] = population(c["smooth"])
            want["energy_mean"], want["energy_std"] = population(c["energy"])
            want["success_rate"] = sum(c["ok"]) / len(c["ok"])
            for k, v in want.items():
                worst = max(worst, abs(float(row[k]) - v) / max(1.0, abs(v)))
            rows += 1
    print(f"python oracle: {rows} rows, worst relative deviation {worst:.1e}")
    sys.exit(0 if worst <= tol and rows > 0 else 1)


if __name__ == "__main__":
    main()
