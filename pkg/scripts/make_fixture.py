"""Regenerate the shipped float fixture weights.

    python scripts/make_fixture.py [output]
"""
import sys
from pathlib import Path

from sleepmod.fixtures import build_fixture, fixture_path
from sleepmod.weights import save_bundle


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else fixture_path()
    save_bundle(build_fixture(), out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
