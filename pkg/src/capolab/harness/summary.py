"""Across-seed statistics and comparison tables."""
from __future__ import annotations

import csv
import glob
import json
import math
import os
from collections import defaultdict

SUMMARY_COLUMNS = ["env_id", "method", "n", "return_mean", "return_se"]


def mean_se(values):
    """Mean and standard error (sample std / sqrt(n)); SE is ``None`` below two values."""
    xs = [float(v) for v in values]
    n = len(xs)
    if n == 0:
        return float("nan"), None
    mean = math.fsum(xs) / n
    if n < 2:
        return mean, None
    var = math.fsum((x - mean) ** 2 for x in xs) / (n - 1)
    return mean, math.sqrt(var) / math.sqrt(n)


def summarize(records):
    """Group per-seed summaries (dicts with env_id, method, final_return) into table rows."""
    groups = defaultdict(list)
    for rec in records:
        groups[(rec["env_id"], rec["method"])].append(rec["final_return"])
    rows = []
    for (env_id, method), returns in sorted(groups.items()):
        mean, se = mean_se(returns)
        rows.append({"env_id": env_id, "method": method, "n": len(returns),
                     "return_mean": mean, "return_se": se})
    return rows


def load_seed_summaries(paths):
    """Every per-seed ``summary.json`` under the given files or directories."""
    out = []
    for path in paths:
        if os.path.isfile(path):
            candidates = [path]
        else:
            candidates = sorted(glob.glob(os.path.join(path, "**", "summary.json"), recursive=True))
        for c in candidates:
            with open(c) as fh:
                data = json.load(fh)
            if "final_return" in data:
                out.append(data)
    return out


def format_table(rows, columns):
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in columns])
