"""Binary-mask helpers shared by the generator, the label evolution and the metrics.

Connectivity is 8-neighbour everywhere. Components are returned in the order of
their first pixel in a row-major scan, so indices are stable across callers.
"""
import numpy as np
from scipy import ndimage

EIGHT = np.ones((3, 3), dtype=bool)


def label(mask):
    """Label 8-connected components. Returns (labels, n) with labels in scan order."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT)
    if n == 0:
        return labels, 0
    # scipy already numbers in raster order of first encounter; enforce it anyway
    flat = labels.ravel()
    first = ndimage.minimum(np.arange(flat.size), flat, index=np.arange(1, n + 1))
    order = np.argsort(np.asarray(first), kind="stable")
    remap = np.zeros(n + 1, dtype=labels.dtype)
    remap[order + 1] = np.arange(1, n + 1)
    return remap[labels], n


def components(mask):
    """List of (rows, cols) index arrays, one per component, in scan order."""
    labels, n = label(mask)
    if n == 0:
        return []
    idx = ndimage.value_indices(labels, ignore_value=0)
    return [idx[k] for k in range(1, n + 1)]


def component_at(mask, point):
    """Boolean mask of the component containing ``point`` (all False if background)."""
    labels, _ = label(mask)
    k = labels[point[0], point[1]]
    if k == 0:
        return np.zeros(labels.shape, dtype=bool)
    return labels == k


def point_disk(shape, point):
    """Radius-1 disk (5-pixel plus), clipped to the image."""
    out = np.zeros(shape, dtype=bool)
    r, c = point
    for dr, dc in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < shape[0] and 0 <= cc < shape[1]:
            out[rr, cc] = True
    return out


def ring(mask, width=5, exclude=None):
    """Dilation ring of ``width`` pixels around ``mask``, minus ``exclude``."""
    mask = np.asarray(mask, dtype=bool)
    grown = ndimage.binary_dilation(mask, structure=EIGHT, iterations=width)
    out = grown & ~mask
    if exclude is not None:
        out &= ~np.asarray(exclude, dtype=bool)
    return out


def bbox_aspect(rows, cols):
    h = int(rows.max() - rows.min() + 1)
    w = int(cols.max() - cols.min() + 1)
    return max(h, w) / min(h, w)
