#!/usr/bin/env python3
"""Full reference run under runs/reference: renders the corpora, trains all
stages, synthesizes every variant for seeds {1,2,3}, runs the evaluation
suites, and writes reports/acceptance.txt with the directional checks.

Takes a few CPU-hours from scratch; finished stages are cached, so re-running
after an interruption resumes where it left off. Extra CLI flags pass through,
e.g. ``python scripts/run_reference.py --set synth.seeds=[1]``."""

import sys

from exprsynth.cli import main

if __name__ == "__main__":
    sys.exit(main(["--profile", "reference", *sys.argv[1:], "repro"]))
