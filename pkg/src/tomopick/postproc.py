"""Peak extraction: max-pool-equivalent local maxima, per-class thresholds,
and conversion of voxel peaks to physical pick coordinates."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import maximum_filter

from .coords import DEFAULT_OFFSET, ParticleClassSpec, PickRecord, PickSet, pixel_to_phys
from .volgrid import Heatmap

DEFAULT_NMS_KERNEL = 7


def local_maxima(
    channel: np.ndarray,
    kernel: int = DEFAULT_NMS_KERNEL,
    min_value: float | None = None,
) -> list[tuple[tuple[int, int, int], float]]:
    """All voxels equal to the max of their kernel^3 neighborhood (clipped to
    bounds), deduplicated on plateaus: among equal-valued voxels within its own
    neighborhood, only the lexicographically smallest (z, y, x) is a peak.

    min_value drops candidates below the threshold before plateau dedup; the
    surviving peaks are identical to filtering afterwards, but large flat
    background regions (e.g. exact zeros) never enter the dedup scan.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 1")
    channel = np.asarray(channel)
    if kernel == 1:
        return [
            (tuple(int(i) for i in idx), float(channel[tuple(idx)]))
            for idx in np.ndindex(channel.shape)
            if min_value is None or channel[tuple(idx)] >= min_value
        ]
    # 'nearest' edge handling only duplicates in-bounds voxels, so the filter
    # max equals the clipped-neighborhood max.
    neigh_max = maximum_filter(channel, size=kernel, mode="nearest")
    candidate = channel == neigh_max
    if min_value is not None:
        candidate &= channel >= min_value
    r = kernel // 2
    d, h, w = channel.shape
    peaks = []
    for z, y, x in np.argwhere(candidate):
        val = channel[z, y, x]
        z0, y0, x0 = max(0, z - r), max(0, y - r), max(0, x - r)
        region = channel[z0 : z + r + 1, y0 : y + r + 1, x0 : x + r + 1]
        ties = np.argwhere(region == val)
        if len(ties) > 1:
            first = min((int(tz) + z0, int(ty) + y0, int(tx) + x0) for tz, ty, tx in ties)
            if (int(z), int(y), int(x)) != first:
                continue
        peaks.append(((int(z), int(y), int(x)), float(val)))
    return peaks


def extract_picks(
    heatmap: Heatmap,
    classes: list[ParticleClassSpec],
    kernel: int = DEFAULT_NMS_KERNEL,
    offset: float = DEFAULT_OFFSET,
) -> PickSet:
    """Per-class NMS + threshold, then voxel index -> physical coordinates."""
    if heatmap.classes != len(classes):
        raise ValueError(
            f"heatmap has {heatmap.classes} channels but {len(classes)} classes configured"
        )
    records = []
    for class_id, cls in enumerate(classes):
        maxima = local_maxima(heatmap.data[class_id], kernel, min_value=cls.detect_threshold)
        for (z, y, x), score in maxima:
            records.append(
                PickRecord(
                    class_id,
                    pixel_to_phys(x, heatmap.spacing, offset),
                    pixel_to_phys(y, heatmap.spacing, offset),
                    pixel_to_phys(z, heatmap.spacing, offset),
                    score,
                )
            )
    return PickSet(tuple(records), heatmap.spacing)
