"""Run-length encoding for binary masks (flat row-major, zeros first)."""
from __future__ import annotations

import numpy as np


def rle_encode(mask):
    """Binary mask -> list of run lengths, starting with the zero run."""
    flat = np.asarray(mask).reshape(-1).astype(bool)
    runs = []
    current, count = False, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return runs


def rle_decode(runs, shape):
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, value = 0, False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != flat.size:
        raise ValueError("run lengths do not cover the mask")
    return flat.reshape(shape)
