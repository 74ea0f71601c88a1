from typing import Sequence, Tuple

import numpy as np


def encode_mask(mask: np.ndarray) -> Tuple[int, ...]:
    """
    Run-length encode a boolean mask in row-major order

    Runs alternate False/True and always start with a False run (possibly 0).

    Args:
        mask: 2D boolean array

    Returns:
        Tuple of run lengths summing to mask.size
    """
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return ()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return tuple(int(r) for r in runs)


def decode_mask(runs: Sequence[int], shape: Tuple[int, int]) -> np.ndarray:
    """
    Decode runs produced by encode_mask

    Args:
        runs: Alternating run lengths, first run is False
        shape: Target (rows, cols)

    Returns:
        Boolean array of the given shape
    """
    total = int(shape[0]) * int(shape[1])
    if sum(runs) != total:
        raise ValueError(f"runs cover {sum(runs)} cells, shape needs {total}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, np.asarray(runs, dtype=np.int64))
    return flat.reshape(shape)
