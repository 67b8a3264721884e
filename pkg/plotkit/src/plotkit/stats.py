"""Percentile box statistics with linear interpolation."""

from __future__ import annotations

import numpy as np

BOX_PERCENTILES = (10.0, 25.0, 50.0, 75.0, 90.0)


def box_stats(values) -> dict:
    """Whisker/box/median positions for one box: 10/25/50/75/90th
    percentiles, linearly interpolated."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot build box statistics from an empty series")
    p10, p25, p50, p75, p90 = np.percentile(values, BOX_PERCENTILES,
                                            method="linear")
    return {"whislo": float(p10), "q1": float(p25), "med": float(p50),
            "q3": float(p75), "whishi": float(p90), "fliers": []}
