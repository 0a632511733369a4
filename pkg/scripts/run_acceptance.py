"""Run the acceptance suite and print only the per-criterion verdict lines.

    python scripts/run_acceptance.py [--fast]

--fast skips the toy-experiment criteria (6-10, 12), which take about 40 minutes.
"""

import argparse
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fast", action="store_true")
    args = ap.parse_args()
    cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(ROOT / "tests" / "test_acceptance.py")]
    if args.fast:
        cmd += ["-m", "not slow"]
    proc = subprocess.run(cmd, cwd=ROOT, capture_output=True, text=True)
    lines = [ln[ln.index("criterion") :] for ln in proc.stdout.splitlines() if "criterion" in ln and (": PASS" in ln or ": FAIL" in ln)]
    print("\n".join(lines))
    print(proc.stdout.splitlines()[-1] if proc.stdout else proc.stderr)
    return proc.returncode


if __name__ == "__main__":
    sys.exit(main())
