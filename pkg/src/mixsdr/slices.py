"""One-hot slice indicators for the response.

A continuous response is discretized into H bins of (near-)equal counts; a
discrete response maps each observed category to its own column.  The
indicator matrix is the building block of every sliced estimator here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SliceIndicator", "slice_indicator"]


@dataclass(frozen=True)
class SliceIndicator:
    """n x H one-hot representation of a sliced response.

    Attributes
    ----------
    matrix : ndarray of shape (n, H)
        Exactly one 1 per row.
    boundaries : ndarray of shape (H - 1,)
        Cut points between consecutive slices (continuous mode), or the
        sorted category values without the last one (discrete mode).
    H : int
        Number of slices.
    """

    matrix: np.ndarray
    boundaries: np.ndarray
    H: int

    @property
    def labels(self) -> np.ndarray:
        """Slice index in {0, ..., H-1} for each observation."""
        return np.argmax(self.matrix, axis=1)

    @property
    def counts(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


def slice_indicator(y, H: int | None = None, mode: str = "continuous") -> SliceIndicator:
    """Build the slice indicator of a response vector.

    Parameters
    ----------
    y : array-like of shape (n,)
        Response values (reals in continuous mode, anything hashable by
        numpy in discrete mode).
    H : int
        Number of slices.  Continuous mode requires ``2 <= H <= n``.
        Discrete mode requires ``H`` to equal the number of observed
        categories (it may be omitted, in which case it is inferred).
    mode : {"continuous", "discrete"}

    Notes
    -----
    Continuous slices hold the observations whose rank falls in
    ``((h-1) n / H, h n / H]``; boundary ties are broken by the stable order
    of (value, original index), so the indicator is invariant under any
    strictly increasing transform of ``y``.
    """
    y = np.asarray(y)
    n = y.shape[0]
    if mode == "discrete":
        cats = np.unique(y)
        if H is None:
            H = len(cats)
        if H != len(cats):
            raise ValueError(
                f"discrete mode needs H == number of categories ({len(cats)}), got {H}"
            )
        mat = (y[:, None] == cats[None, :]).astype(float)
        boundaries = np.asarray(cats[:-1], dtype=float)
        return SliceIndicator(mat, boundaries, H)
    if mode != "continuous":
        raise ValueError(f"unknown slicing mode: {mode!r}")
    if H is None or H < 2:
        raise ValueError("continuous mode requires H >= 2")
    if H > n:
        raise ValueError("H exceeds the sample size")
    order = np.argsort(y, kind="stable")
    edges = (np.arange(H + 1) * n) // H
    mat = np.zeros((n, H))
    for h in range(H):
        mat[order[edges[h]:edges[h + 1]], h] = 1.0
    y_sorted = y[order].astype(float)
    boundaries = np.array(
        [0.5 * (y_sorted[edges[h] - 1] + y_sorted[edges[h]]) for h in range(1, H)]
    )
    return SliceIndicator(mat, boundaries, H)
