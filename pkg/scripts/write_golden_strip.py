from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from core.strip import ScanStrip, write_strip  # noqa: E402


def build_golden_strip() -> ScanStrip:
    """2x3 raster, three returns on a diagonal pattern; arc grows by column."""
    strip = ScanStrip.empty(strip_id=7, scanner_id=1, trajectory_id=3, rows=2, cols=3)
    cells = {(0, 0): (1.0, 2.0, 3.0), (0, 2): (4.0, 5.0, 6.0), (1, 1): (7.0, 8.0, 9.0)}
    for (row, col), xyz in cells.items():
        strip.valid[row, col] = True
        strip.xyz[row, col] = xyz
        strip.t0[row, col] = (0.0, 0.0, 2.5)
        strip.arc[row, col] = 0.25 * col
    return strip


def main() -> int:
    parser = argparse.ArgumentParser(description="Write the golden sample strip documented in README.md.")
    parser.add_argument("--output", default="data/golden_sample.strip", help="Output path.")
    args = parser.parse_args()

    output_path = Path(args.output)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    write_strip(build_golden_strip(), output_path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
