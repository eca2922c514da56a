#!/usr/bin/env python3
"""
SLADE metric - command line entry point.

Usage:
    python main.py [--log-level LEVEL] [--progress] COMMAND [options]

Commands:
    gen-data        Generate the synthetic seen/unseen benchmark
    train-teacher   Train the teacher on labeled data
    pseudo-label    Cluster unlabeled data with a teacher
    train-student   Train student and basis from a teacher
    self-train      Run the full self-training loop
    run-folds       Train and concatenate per-fold students
    evaluate        Leave-one-out retrieval metrics
    gradcheck       Finite-difference check of every gradient

Example:
    python main.py gen-data --out-dir bench
    python main.py self-train --config slade.cfg --labeled bench/labeled.data \
        --unlabeled bench/unlabeled.data --eval bench/test.data --out-dir run
"""
import sys

from src.__main__ import main

if __name__ == "__main__":
    sys.exit(main())
