"""Regenerate the CLI golden files under tests/golden/."""
import contextlib
import io
import shutil
import sys
import tempfile
from pathlib import Path

from sleepmod.cli import main

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"

# (golden name, argv, produced file or None for stdout)
CASES = [
    ("estimate.json", ["estimate", "--out", "{tmp}/out"], "out"),
    ("estimate30.json", ["estimate", "--segment", "30", "--out", "{tmp}/out"], "out"),
    ("calibrate_entropy.json", ["calibrate", "--method", "entropy", "--windows", "16", "--seed", "2",
                                "--out", "{tmp}/out"], "out"),
    ("filter_reference.json", ["filter-design"], None),
    ("filter_equal.json", ["filter-design", "--preset", "equal"], None),
    ("lut.txt", ["lut-dump"], None),
    ("pink_multi.json", ["pinknoise", "--n", "65536", "--seed", "4", "--report"], None),
    ("pink_single.json", ["pinknoise", "--n", "65536", "--seed", "4", "--mode", "single_pole", "--report"], None),
    ("fig6_events.ndjson", ["simulate", "--preset", "fig6", "--delay", "13", "--out-dir", "{tmp}"],
     "events.ndjson"),
    ("fig6_summary.json", ["simulate", "--preset", "fig6", "--delay", "13", "--out-dir", "{tmp}"],
     "summary.json"),
]


def run_case(argv, produced):
    tmp = tempfile.mkdtemp()
    try:
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main([a.format(tmp=tmp) for a in argv])
        if code != 0:
            raise SystemExit(f"{argv} exited with {code}")
        return buf.getvalue().encode() if produced is None else (Path(tmp) / produced).read_bytes()
    finally:
        shutil.rmtree(tmp)


if __name__ == "__main__":
    GOLDEN.mkdir(parents=True, exist_ok=True)
    only = set(sys.argv[1:])
    for name, argv, produced in CASES:
        if only and name not in only:
            continue
        (GOLDEN / name).write_bytes(run_case(argv, produced))
        print("wrote", name)
