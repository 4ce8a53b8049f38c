"""Training-sample selection and 2.5D patch extraction.

Positives are every structure voxel.  Negatives are drawn, in equal number,
either from the band of background voxels within ``boundary_distance``
(Chebyshev metric) of a structure, or uniformly from all background brain
voxels for the random-sampling ablation.

Samples are stored as voxel coordinates; patches are gathered on demand by
:meth:`SampleSet.batch`, which keeps memory proportional to the number of
samples rather than to 3 x 32 x 32 floats per sample.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import DegenerateImage, InvalidVolume, NoStructureVoxels
from .nifti_io import N_CLASSES, AtlasVolume, LabelVolume, ScalarVolume

log = logging.getLogger(__name__)

PATCH_SIZE = 32
HALF = PATCH_SIZE // 2
BOUNDARY = "boundary_restricted"
RANDOM = "random_background"
MODES = (BOUNDARY, RANDOM)


@dataclass(frozen=True)
class SamplingConfig:
    mode: str = BOUNDARY
    boundary_distance: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.boundary_distance < 1:
            raise ValueError("boundary_distance must be >= 1")


class Sample(NamedTuple):
    voxel: tuple
    patches: np.ndarray  # (3, 32, 32): axial, coronal, sagittal
    prior: np.ndarray  # (15,)
    label: int


def normalize_intensity(image: ScalarVolume) -> ScalarVolume:
    """Z-score the nonzero (brain) voxels; zero voxels stay zero."""
    data = image.data
    brain = data != 0
    if not brain.any():
        raise DegenerateImage("image has no nonzero voxels")
    values = data[brain]
    mu = values.mean()
    sigma = max(values.std(), 1e-6)
    out = np.zeros_like(data)
    out[brain] = (values - mu) / sigma
    return ScalarVolume(image.header, out)


def boundary_mask(labels: LabelVolume, distance: int) -> np.ndarray:
    """Background voxels within Chebyshev ``distance`` of any structure voxel."""
    if distance < 1:
        raise ValueError("distance must be >= 1")
    structure = labels.data > 0
    if not structure.any():
        return np.zeros_like(structure)
    grown = ndimage.binary_dilation(structure, structure=np.ones((3, 3, 3), bool), iterations=distance)
    return grown & ~structure


def pad_volume(data: np.ndarray) -> np.ndarray:
    """Zero-pad by half a patch on every side, as float32."""
    return np.pad(np.asarray(data, dtype=np.float32), HALF)


_OFFSETS = np.arange(PATCH_SIZE)


def gather_patches(padded: np.ndarray, voxels: np.ndarray) -> np.ndarray:
    """Patches for many voxels from a :func:`pad_volume` array.

    Returns shape (N, 3, 32, 32).  Axial fixes z (rows y, columns x),
    coronal fixes y (rows z, columns x), sagittal fixes x (rows z, columns y).
    Row/column 16 is the voxel itself.
    """
    voxels = np.asarray(voxels, dtype=np.intp).reshape(-1, 3)
    x, y, z = voxels[:, 0, None, None], voxels[:, 1, None, None], voxels[:, 2, None, None]
    rows = _OFFSETS[None, :, None]
    cols = _OFFSETS[None, None, :]
    out = np.empty((len(voxels), 3, PATCH_SIZE, PATCH_SIZE), np.float32)
    # padded coordinates of voxel v are v + HALF, so window v-16..v+15 is v+0..v+31
    out[:, 0] = padded[x + cols, y + rows, z + HALF]
    out[:, 1] = padded[x + cols, y + HALF, z + rows]
    out[:, 2] = padded[x + HALF, y + cols, z + rows]
    return out


def extract_patch_2p5d(image: ScalarVolume, voxel) -> np.ndarray:
    """The three orthogonal 32x32 patches centred on ``voxel``, zero outside the volume."""
    voxel = tuple(int(v) for v in voxel)
    if any(not 0 <= v < s for v, s in zip(voxel, image.shape)):
        raise IndexError(f"voxel {voxel} outside volume of shape {image.shape}")
    return gather_patches(pad_volume(image.data), np.array([voxel]))[0]


def prior_vector(atlas: AtlasVolume, voxel) -> np.ndarray:
    return np.array(atlas.data[tuple(int(v) for v in voxel)], dtype=np.float64)


class SampleSet:
    """Voxel samples across one or more subjects, with lazy patch gathering."""

    def __init__(self, padded_images, atlases, subject, voxels, labels):
        self.padded_images = list(padded_images)
        self.atlases = list(atlases)
        self.subject = np.asarray(subject, dtype=np.intp)
        self.voxels = np.asarray(voxels, dtype=np.intp).reshape(-1, 3)
        self.labels = np.asarray(labels, dtype=np.intp)
        if not len(self.subject) == len(self.voxels) == len(self.labels):
            raise ValueError("subject, voxels and labels must have equal length")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        patches, priors, labels = self.batch(np.array([i]))
        return Sample(tuple(int(v) for v in self.voxels[i]), patches[0], priors[0], int(labels[0]))

    def batch(self, indices) -> tuple:
        """``(patches (B,3,32,32) float32, priors (B,15) float32, labels (B,))``."""
        indices = np.asarray(indices, dtype=np.intp)
        patches = np.empty((len(indices), 3, PATCH_SIZE, PATCH_SIZE), np.float32)
        priors = np.empty((len(indices), N_CLASSES), np.float32)
        subjects = self.subject[indices]
        for s in np.unique(subjects):
            sel = np.flatnonzero(subjects == s)
            vox = self.voxels[indices[sel]]
            patches[sel] = gather_patches(self.padded_images[s], vox)
            priors[sel] = self.atlases[s][vox[:, 0], vox[:, 1], vox[:, 2]]
        return patches, priors, self.labels[indices]

    def subset(self, indices) -> "SampleSet":
        indices = np.asarray(indices, dtype=np.intp)
        return SampleSet(self.padded_images, self.atlases, self.subject[indices],
                         self.voxels[indices], self.labels[indices])

    @classmethod
    def concatenate(cls, sets) -> "SampleSet":
        images, atlases, subject, voxels, labels = [], [], [], [], []
        for s in sets:
            offset = len(images)
            images.extend(s.padded_images)
            atlases.extend(s.atlases)
            subject.append(s.subject + offset)
            voxels.append(s.voxels)
            labels.append(s.labels)
        return cls(images, atlases, np.concatenate(subject), np.concatenate(voxels),
                   np.concatenate(labels))


def select_samples(image: ScalarVolume, labels: LabelVolume, atlas: AtlasVolume,
                   config: SamplingConfig = SamplingConfig()) -> SampleSet:
    """Balanced positive/negative voxel samples for one subject.

    ``image`` is the raw intensity image; it is z-score normalized here and
    its nonzero voxels define the brain for random-mode negatives.
    Positives come first in row-major order, followed by the negatives in
    draw order.  If the negative pool is smaller than the positive count the
    negatives are drawn with replacement and a warning is issued.
    """
    if image.shape != labels.shape or image.shape != atlas.shape:
        raise InvalidVolume(f"grid mismatch: image {image.shape}, labels {labels.shape}, atlas {atlas.shape}")
    positives = np.argwhere(labels.data > 0)
    if len(positives) == 0:
        raise NoStructureVoxels("label volume contains no structure voxels")

    if config.mode == BOUNDARY:
        pool = np.argwhere(boundary_mask(labels, config.boundary_distance))
    else:
        pool = np.argwhere((image.data != 0) & (labels.data == 0))
    if len(pool) == 0:
        raise NoStructureVoxels("no eligible background voxels for negative samples")

    rng = np.random.default_rng(config.seed)
    replace = len(pool) < len(positives)
    if replace:
        warnings.warn(f"negative pool ({len(pool)}) smaller than positives ({len(positives)}); "
                      "sampling negatives with replacement", RuntimeWarning, stacklevel=2)
    negatives = pool[rng.choice(len(pool), size=len(positives), replace=replace)]
    log.debug("selected %d positives and %d negatives (%s)", len(positives), len(negatives), config.mode)

    voxels = np.concatenate([positives, negatives])
    classes = np.concatenate([labels.data[tuple(positives.T)].astype(np.intp),
                              np.zeros(len(negatives), np.intp)])
    padded = pad_volume(normalize_intensity(image).data)
    return SampleSet([padded], [atlas.data], np.zeros(len(voxels), np.intp), voxels, classes)
