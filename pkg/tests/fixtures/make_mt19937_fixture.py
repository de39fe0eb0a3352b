"""Regenerate mt19937_1234567890.json from numpy's legacy RandomState.

The fixture is the reference the self-contained MT19937 is tested against;
run this only to rebuild it, never from the test suite.
"""

import json
from pathlib import Path

import numpy as np

SEED = 1234567890
# (low, high) pairs: protocol-like draws on typical 25 fps trial lengths, then edge cases
RANGES = [(16, 1400 - 150), (16, 1600 - 150), (16, 800 - 150), (16, 2000 - 150),
          (16, 1100 - 150), (16, 900 - 150), (16, 1300 - 150), (16, 1700 - 150),
          (0, 1), (5, 6), (0, 2**32), (0, 2**40), (-7, 3), (0, 3)]


def main():
    raw = np.random.RandomState(SEED).randint(0, 2**32, size=16, dtype=np.int64).tolist()
    rs = np.random.RandomState(SEED)
    bounded = [[lo, hi, int(rs.randint(lo, hi))] for lo, hi in RANGES]
    out = {"seed": SEED, "raw_uint32": raw, "bounded": bounded}
    path = Path(__file__).with_name("mt19937_1234567890.json")
    path.write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
