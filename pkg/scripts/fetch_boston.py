#!/usr/bin/env python3
"""Download the Boston Housing dataset and write it as a plain CSV.

The canonical StatLib file spreads each of the 506 cases over two lines;
this script re-joins them and writes data/boston_housing.csv with header

    CRIM,ZN,INDUS,CHAS,NOX,RM,AGE,DIS,RAD,TAX,PTRATIO,B,LSTAT,MEDV

(13 predictors followed by the response MEDV, the median home value).
Run it once from the repository root; the lasso CLI and the acceptance
suite pick the file up from data/boston_housing.csv or the path in the
OTMAP_BOSTON_CSV environment variable.
"""

import csv
import sys
import urllib.request
from pathlib import Path

URL = "http://lib.stat.cmu.edu/datasets/boston"
COLUMNS = [
    "CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE",
    "DIS", "RAD", "TAX", "PTRATIO", "B", "LSTAT", "MEDV",
]
HEADER_LINES = 22


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("data/boston_housing.csv")
    print(f"fetching {URL} ...")
    raw = urllib.request.urlopen(URL, timeout=60).read().decode("ascii")
    lines = raw.splitlines()[HEADER_LINES:]
    values = []
    for line in lines:
        values.extend(float(tok) for tok in line.split())
    if len(values) % len(COLUMNS) != 0:
        print(f"unexpected token count {len(values)}; source format changed?")
        return 1
    rows = [values[i:i + len(COLUMNS)] for i in range(0, len(values), len(COLUMNS))]
    if len(rows) != 506:
        print(f"expected 506 cases, parsed {len(rows)}")
        return 1
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        writer.writerows(rows)
    print(f"wrote {out} ({len(rows)} rows)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
