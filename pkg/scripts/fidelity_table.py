#!/usr/bin/env python3
"""Print the fidelity ablation table from a finished run.

Rows are conditioning variants; columns are oracle expression accuracy (FER),
oracle action-unit accuracy (FAU), and Frechet distance to the real test set
where it was computed. Reads reports/metrics.json under the given run root.

Usage: python scripts/fidelity_table.py [RUN_ROOT]   (default: runs/reference)
"""

import json
import sys
from pathlib import Path


def main() -> int:
    root = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/reference")
    path = root / "reports" / "metrics.json"
    if not path.exists():
        print(f"no metrics at {path}; run `exprsynth eval` or `exprsynth repro` first",
              file=sys.stderr)
        return 1
    m = json.loads(path.read_text())
    print(f"{'variant':<14} {'FER':>8} {'FAU':>8} {'FID':>10}")
    for variant in ("guided", "au_only", "text_only"):
        fid = m.get(f"mean_fid_{variant}")
        fid_col = f"{fid:>10.4f}" if fid is not None else f"{'-':>10}"
        print(f"{variant:<14} {m[f'mean_fer_{variant}']:>8.4f} "
              f"{m[f'mean_fau_{variant}']:>8.4f} {fid_col}")
    if "mean_fid_unconditional" in m:
        print(f"{'unconditional':<14} {'-':>8} {'-':>8} "
              f"{m['mean_fid_unconditional']:>10.4f}")
    print(f"\nmean acceptance rate (voted guided sets): "
          f"{m['mean_acceptance_rate']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
