"""CSV emission helpers.

All numeric output uses 17 significant digits and '.' as the decimal mark so
that files are bit-stable and round-trip float64 exactly.
"""

from __future__ import annotations

import numpy as np


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(path, header, rows) -> None:
    """Write rows (iterables of numbers or strings) under a header line."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(str(h) for h in header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else fmt(v) for v in row) + "\n")
