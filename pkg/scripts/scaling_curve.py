#!/usr/bin/env python3
"""Print the synthetic-only scaling curve from a finished run.

Reads reports/scaling.json (per-seed downstream accuracy over nested prefix
sizes of the voted guided sets) and reports whether each seed's curve is
non-decreasing.

Usage: python scripts/scaling_curve.py [RUN_ROOT]   (default: runs/reference)
"""

import json
import sys
from pathlib import Path


def main() -> int:
    root = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/reference")
    path = root / "reports" / "scaling.json"
    if not path.exists():
        print(f"no scaling results at {path}; run `exprsynth eval` first",
              file=sys.stderr)
        return 1
    results = json.loads(path.read_text())
    sizes = sorted({int(s) for accs in results.values() for s in accs})
    header = "seed " + " ".join(f"{s:>8}" for s in sizes) + "  non-decreasing"
    print(header)
    for seed in sorted(results, key=int):
        series = [results[seed][str(s)] for s in sizes]
        mono = all(b >= a for a, b in zip(series, series[1:]))
        print(f"{seed:>4} " + " ".join(f"{v:>8.4f}" for v in series)
              + f"  {'yes' if mono else 'no'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
