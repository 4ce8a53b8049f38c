"""Segmenting a new volume with a trained model."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from . import model as M
from .errors import EmptyRoi, ShapeMismatch
from .nifti_io import DT_UINT8, N_CLASSES, AtlasVolume, LabelVolume, ScalarVolume
from .sampling import gather_patches, normalize_intensity, pad_volume

log = logging.getLogger(__name__)

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class Roi:
    min_corner: tuple
    max_corner: tuple  # inclusive

    @property
    def slices(self) -> tuple:
        return tuple(slice(lo, hi + 1) for lo, hi in zip(self.min_corner, self.max_corner))

    @property
    def shape(self) -> tuple:
        return tuple(hi - lo + 1 for lo, hi in zip(self.min_corner, self.max_corner))

    def voxels(self) -> np.ndarray:
        """ROI voxels as (N, 3) (x, y, z) rows, z varying slowest and x fastest."""
        (x0, y0, z0), (x1, y1, z1) = self.min_corner, self.max_corner
        z, y, x = np.meshgrid(np.arange(z0, z1 + 1), np.arange(y0, y1 + 1), np.arange(x0, x1 + 1),
                              indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def compute_roi(atlas: AtlasVolume, prob_threshold: float = 0.0, margin: int = 8) -> Roi:
    """Bounding box of voxels where some structure channel exceeds the threshold,
    grown by ``margin`` voxels per side and clipped to the volume."""
    if not 0 <= prob_threshold < 1:
        raise ValueError("prob_threshold must lie in [0, 1)")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    inside = atlas.data[..., 1:].max(axis=-1) > prob_threshold
    if not inside.any():
        raise EmptyRoi(f"no voxel has structure probability above {prob_threshold}")
    lo, hi = [], []
    for axis, extent in enumerate(atlas.shape):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(inside.any(axis=other))
        lo.append(max(int(hits[0]) - margin, 0))
        hi.append(min(int(hits[-1]) + margin, extent - 1))
    return Roi(tuple(lo), tuple(hi))


def classify_roi(params: M.ModelParams, image: ScalarVolume, atlas: AtlasVolume, roi: Roi,
                 batch_size: int = 128, threads: int = 1) -> LabelVolume:
    """MAP label for every ROI voxel; everything outside the ROI is background.

    ``image`` must already be intensity-normalized.  Voxels are visited z
    slowest, x fastest, in fixed batches, so the result does not depend on
    ``threads``; ties in the argmax go to the lowest class index.
    """
    if image.shape != atlas.shape:
        raise ShapeMismatch(f"image {image.shape} and atlas {atlas.shape} grids differ")
    if any(lo < 0 or hi >= s for lo, hi, s in zip(roi.min_corner, roi.max_corner, image.shape)):
        raise ShapeMismatch(f"ROI {roi} outside volume of shape {image.shape}")
    padded = pad_volume(image.data)
    voxels = roi.voxels()
    out = np.zeros(image.shape, np.uint8)
    starts = range(0, len(voxels), batch_size)

    def run(start):
        vox = voxels[start:start + batch_size]
        patches = gather_patches(padded, vox)
        priors = atlas.data[vox[:, 0], vox[:, 1], vox[:, 2]] if params.use_atlas_branch else None
        scores = M.logits(params, patches, priors).values
        out[vox[:, 0], vox[:, 1], vox[:, 2]] = scores.argmax(axis=1)

    log.info("classifying %d ROI voxels %s", len(voxels), roi.shape)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for start in starts:
            run(start)
    return LabelVolume(replace(image.header, datatype_code=DT_UINT8), out)


def largest_component_filter(labels: LabelVolume) -> LabelVolume:
    """Keep, per class, only the largest 6-connected component.

    Equal-sized components are resolved in favour of the one containing the
    voxel with the smallest row-major index.
    """
    data = labels.data
    out = data.copy()
    for c in range(1, N_CLASSES):
        mask = data == c
        if not mask.any():
            continue
        components, count = ndimage.label(mask, structure=SIX_CONNECTED)
        if count <= 1:
            continue
        flat = components.ravel()
        sizes = np.bincount(flat, minlength=count + 1)
        sizes[0] = 0
        biggest = np.flatnonzero(sizes == sizes.max())
        if len(biggest) > 1:
            ids, first = np.unique(flat, return_index=True)
            first_index = dict(zip(ids.tolist(), first.tolist()))
            keep = min(biggest, key=lambda k: first_index[k])
        else:
            keep = biggest[0]
        out[mask & (components != keep)] = 0
    return LabelVolume(labels.header, out)


def segment(params: M.ModelParams, image: ScalarVolume, atlas: AtlasVolume,
            roi_threshold: float = 0.0, roi_margin: int = 8, batch_size: int = 128,
            threads: int = 1) -> LabelVolume:
    """Full inference: normalize, restrict to the atlas ROI, classify, filter."""
    roi = compute_roi(atlas, roi_threshold, roi_margin)
    raw = classify_roi(params, normalize_intensity(image), atlas, roi, batch_size, threads)
    return largest_component_filter(raw)
