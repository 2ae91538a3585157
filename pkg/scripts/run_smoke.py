#!/usr/bin/env python3
"""Minutes-scale end-to-end run: corpora, training, synthesis, evaluation,
and the directional checks, under runs/smoke. Useful as a plumbing check;
the directional gaps are only calibrated for the reference recipe."""

import sys

from exprsynth.cli import main

if __name__ == "__main__":
    sys.exit(main(["--profile", "smoke", *sys.argv[1:], "repro"]))
