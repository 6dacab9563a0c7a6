"""Command-line runner: ``hetgp --experiment NAME [--seed S] [--trials M] [--out DIR] [--config JSON]``.

``--config`` takes a JSON object (inline, or ``@path`` to read a file) whose
keys override the experiment's defaults; unknown keys are rejected. The
exit code is 0 only when every check of the run passed and all files were
written, 1 when a check failed and 2 on usage or I/O errors. The
``HETGP_THREADS`` environment variable caps the number of worker processes.
"""

import argparse
import json
import sys

from .experiments import EXPERIMENTS, run_experiment


def _load_overrides(text):
    if text is None:
        return {}
    if text.startswith("@"):
        with open(text[1:]) as fh:
            text = fh.read()
    obj = json.loads(text)
    if not isinstance(obj, dict):
        raise ValueError("--config must be a JSON object")
    return obj


def build_parser():
    p = argparse.ArgumentParser(prog="hetgp", description=__doc__.splitlines()[0])
    p.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=None,
                   help="Monte-Carlo trials (instances for theory_checks)")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--config", default=None,
                   help="JSON object of overrides, or @file.json")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = _load_overrides(args.config)
        res = run_experiment(args.experiment, args.seed, args.out, overrides, args.trials)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for note in res.notes:
        print(f"note: {note}")
    for name, ok in res.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"wrote {len(res.files) + 1} files to {args.out}")
    return 0 if res.passed else 1


if __name__ == "__main__":
    sys.exit(main())
