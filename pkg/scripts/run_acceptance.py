"""Run the acceptance criteria and write a JSON summary.

    python3 scripts/run_acceptance.py --out results/acceptance [--only 1 3 7]
"""

import argparse
import json
from pathlib import Path

from gexpect.acceptance import CRITERIA


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("results/acceptance"))
    ap.add_argument("--only", type=int, nargs="*", default=None)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    summary = []
    for k in args.only or sorted(CRITERIA):
        res = CRITERIA[k]()
        print(res.line(), flush=True)
        summary.append({"criterion": k, "name": res.name, "passed": res.passed, "detail": res.detail, "seconds": res.seconds})
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
