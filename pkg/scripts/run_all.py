"""Run every experiment with its default config into one directory.

    python scripts/run_all.py results/ --seed 0
    QRLAB_THREADS=4 python scripts/run_all.py results/ --only sobolev-scan duality-scan

Each experiment writes <dir>/<name>.csv plus the .meta.json sidecar.  The
sobolev scan is repeated for n = 5..8.  Exit status is the worst one seen.
"""

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

from qrlab.cli import EXPERIMENTS, main as qrlab

EXTRA = {"sobolev-scan": [{"n": n} for n in (5, 6, 7, 8)],
         "obata-check": [{"n": n} for n in (5, 6, 7)],
         "duality-scan": [{"n": n} for n in (5, 6)]}


def jobs(names):
    for name in names:
        for cfg in EXTRA.get(name, [{}]):
            tag = name + "".join(f"-{k}{v}" for k, v in cfg.items())
            yield name, tag, cfg


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("outdir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--only", nargs="+", choices=sorted(EXPERIMENTS), default=list(EXPERIMENTS))
    args = ap.parse_args()
    args.outdir.mkdir(parents=True, exist_ok=True)
    worst = 0
    with tempfile.TemporaryDirectory() as tmp:
        for name, tag, cfg in jobs(args.only):
            path = Path(tmp) / f"{tag}.json"
            path.write_text(json.dumps(cfg))
            start = time.perf_counter()
            code = qrlab([name, "--config", str(path), "--seed", str(args.seed),
                          "--out", str(args.outdir / f"{tag}.csv")])
            print(f"{tag:<28} exit {code}  {time.perf_counter() - start:7.1f}s", flush=True)
            worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
