"""Channel-independent, temporally overlapped patching of scalp fragments.

A fragment (..., n_channels, n_timepoints) is zero-padded at the tail to
the next full window and cut into length-l windows with a fixed stride;
merge is exact overlap-add divided by per-sample coverage.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ParameterError


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray        # (..., n_channels, n_patches, l)
    l: int
    stride: int
    n_timepoints_original: int

    @property
    def n_patches(self):
        return self.patches.shape[-2]


def padded_length(n_timepoints, l, stride):
    """Smallest windowable length >= n_timepoints for the given (l, stride)."""
    if n_timepoints <= l:
        return l
    n_windows = int(np.ceil((n_timepoints - l) / stride)) + 1
    return stride * (n_windows - 1) + l


def extract_patches(x, l, overlap):
    """Cut (..., n_channels, n_timepoints) into an overlapping PatchGrid."""
    if l < 2:
        raise ParameterError(f"patch length must be >= 2, got {l}")
    if not (0 <= overlap < l):
        raise ParameterError(f"overlap must be in [0, {l}), got {overlap}")
    x = np.asarray(x, dtype=np.float64)
    stride = l - overlap
    n_t = x.shape[-1]
    n_pad = padded_length(n_t, l, stride)
    if n_pad > n_t:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, n_pad - n_t)]
        x = np.pad(x, pad)
    n_p = (n_pad - l) // stride + 1
    idx = stride * np.arange(n_p)[:, None] + np.arange(l)[None, :]
    patches = x[..., idx]
    return PatchGrid(patches=patches, l=l, stride=stride, n_timepoints_original=n_t)


def merge_patches(grid):
    """Exact inverse of :func:`extract_patches` for unmodified patches."""
    p = grid.patches
    if p.shape[-1] != grid.l:
        raise FormatError("PatchGrid metadata disagrees with patch array")
    n_p = p.shape[-2]
    n_pad = grid.stride * (n_p - 1) + grid.l
    out = np.zeros(p.shape[:-2] + (n_pad,))
    cov = np.zeros(n_pad)
    idx = grid.stride * np.arange(n_p)[:, None] + np.arange(grid.l)[None, :]
    np.add.at(out, (..., idx.ravel()), p.reshape(p.shape[:-2] + (n_p * grid.l,)))
    np.add.at(cov, idx.ravel(), np.ones(n_p * grid.l))
    out = out / cov
    return out[..., :grid.n_timepoints_original]


def coverage_counts(n_patches, l, stride):
    """How many windows cover each padded time sample."""
    n_pad = stride * (n_patches - 1) + l
    cov = np.zeros(n_pad)
    idx = stride * np.arange(n_patches)[:, None] + np.arange(l)[None, :]
    np.add.at(cov, idx.ravel(), np.ones(n_patches * l))
    return cov


def normalize_fragment(x):
    """Divide by the max absolute value; all-zero input passes with scale 1."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("fragment contains non-finite values")
    scale = float(np.max(np.abs(x)))
    if scale == 0.0:
        return x.copy(), 1.0
    return x / scale, scale
