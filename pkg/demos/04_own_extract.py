"""Running stage by stage on an extract you supply.

The pipeline reads patients.csv, encounters.csv, diagnoses.csv, labs.csv
and vitals.csv from one data directory. Here a
synthetic extract stands in for a real one; swap ``--data`` for your own.
"""

import sys
import tempfile
from pathlib import Path

from cirrhosis_horizon.cli import main

work = Path(tempfile.mkdtemp(prefix="ch_demo_"))
data, out = work / "extract", work / "run"

# 1. Produce a stand-in extract (skip this for real data).
main(["generate", "--out", str(work / "gen"), "--window", "2", "--seed", "11"])
(work / "gen" / "data").rename(data)

# 2. Each later stage reads what the previous one wrote into --out.
common = ["--data", str(data), "--out", str(out), "--window", "2", "--seed", "11"]
for stage in ("cohort", "features", "train", "eval"):
    print(f"$ cirrhosis-horizon {stage}")
    if main([stage, *common]) != 0:
        sys.exit(1)

# 3. The serum indices alone, straight from the labs file.
main(["score", "fib4", "--input", str(data / "labs.csv"), "--output", str(work / "fib4.csv")])
print("\n".join((work / "fib4.csv").read_text().splitlines()[:5]))
print(f"\noutputs in {out}")
