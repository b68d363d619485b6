#!/usr/bin/env python3
"""
Write the synthetic fixture set used by the desk-scale runs and the tests.

One labelled PLY per shape and repetition, laid out as <out>/<shape>/<shape>_NNN.ply.
"""

import argparse
import sys
from pathlib import Path

# Add the project directory to the Python path
project_dir = Path(__file__).parent.parent
sys.path.insert(0, str(project_dir))

from app.core.logging import configure_logging  # noqa: E402
from app.services.synthetic import SHAPES, write_fixture_set  # noqa: E402


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--points", type=int, default=512)
    parser.add_argument("--per-class", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--shapes", nargs="+", default=list(SHAPES), choices=sorted(SHAPES))
    args = parser.parse_args()

    configure_logging("INFO")
    written = write_fixture_set(
        args.out, args.points, per_class=args.per_class, seed=args.seed, shapes=args.shapes
    )
    print(f"✅ Wrote {len(written)} clouds to {args.out}")


if __name__ == "__main__":
    main()
