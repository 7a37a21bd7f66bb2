"""Print per-arm medians over seeds (recall, effective rank, RSA) and the gain table.

Recall is reported at K=10, or at the largest evaluated K below it.

Usage: python3 scripts/summarize.py <workdir>
"""
import csv
import json
import sys
from pathlib import Path

import numpy as np


def main(root: str) -> int:
    report = Path(root) / "report"
    if not (report / "geometry.csv").exists():
        print(f"{report} has no report; run the pipeline first", file=sys.stderr)
        return 3
    geo = list(csv.DictReader(open(report / "geometry.csv")))
    arms = sorted({row["arm"] for row in geo})
    first = geo[0]
    metrics = json.loads((Path(root) / f"seed_{first['seed']}" / first["arm"] / "metrics.json")
                         .read_text())
    ks = sorted(int(key.split("@")[1]) for key in metrics if key.startswith("recall@"))
    k = max([x for x in ks if x <= 10] or ks[:1])
    print(f"{'arm':<16}{f'recall@{k}':>11}{'erank':>9}{'rsa_r':>9}   (medians over seeds)")
    for arm in arms:
        rows = [r for r in geo if r["arm"] == arm]
        recall = [json.loads((Path(root) / f"seed_{r['seed']}" / arm / "metrics.json")
                             .read_text())[f"recall@{k}"]["mean"] for r in rows]
        erank = [float(r["erank"]) for r in rows if r["erank"]]
        rsa = [float(r["rsa_pearson"]) for r in rows if r["rsa_pearson"]]
        cells = [np.median(v) if v else float("nan") for v in (recall, erank, rsa)]
        print(f"{arm:<16}{cells[0]:>11.4f}{cells[1]:>9.3f}{cells[2]:>9.4f}")
    print()
    print((report / "gain_table.csv").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else "runs/default"))
