"""Regenerate tests/data/oracle_frozen.json (extrapolated full-domain references)."""

import json
import time
from pathlib import Path

from frwmw.oracle import extrapolated_reference
from frwmw.scenes import BENCHMARKS, benchmark

RESOLUTION = 32
OUT = Path(__file__).with_name("data") / "oracle_frozen.json"


def main():
    data = {"resolution": RESOLUTION, "structures": {}}
    for name in BENCHMARKS:
        t0 = time.perf_counter()
        ref = extrapolated_reference(benchmark(name), RESOLUTION)
        data["structures"][name] = {
            "terminals": ref.terminals,
            "matrix": ref.matrix.tolist(),
            "ground": ref.ground.tolist(),
            "mesh": list(ref.resolution),
        }
        print(f"{name}: {time.perf_counter() - t0:.1f}s", flush=True)
    OUT.write_text(json.dumps(data, indent=1) + "\n")


if __name__ == "__main__":
    main()
