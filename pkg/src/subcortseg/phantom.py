"""Synthetic T1-like phantoms with 14 ellipsoidal structures and a blurred atlas.

Structures come in left/right pairs mirrored across the x midline and are
packed into a compact block at the centre of an ellipsoidal "brain".  Voxels
outside the brain are exactly zero, as in a skull-stripped scan.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import OverlappingStructures, StructureOutOfBounds
from .nifti_io import N_CLASSES, AtlasVolume, LabelVolume, ScalarVolume, normalize_priors, write_volume

JITTER_RADIUS = 3.0
INTENSITY_JITTER = 0.05
ATLAS_GROWTH = 0.5

# left-hemisphere layout: offset from the volume centre, semi-axes, mean intensity.
# Right-hemisphere twins mirror x and share the intensity.
_LAYOUT = (
    ((-7.0, -6.0, 6.0), (4.0, 5.0, 4.0), 55.0),    # thalamus
    ((-7.0, 7.0, 6.0), (4.0, 5.0, 4.0), 150.0),    # caudate
    ((-19.0, -6.0, 6.0), (4.0, 5.0, 4.0), 175.0),  # putamen
    ((-7.0, -6.0, -6.0), (4.0, 5.0, 4.0), 25.0),   # pallidum
    ((-19.0, 7.0, 6.0), (4.0, 5.0, 4.0), 40.0),    # hippocampus
    ((-19.0, -6.0, -6.0), (4.0, 4.0, 4.0), 10.0),  # amygdala
    ((-7.0, 7.0, -6.0), (4.0, 4.0, 4.0), 200.0),   # accumbens
)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple  # voxel coordinates (x, y, z)
    semi_axes: tuple  # voxels
    intensity: float

    def mask(self, shape, grow: float = 0.0) -> np.ndarray:
        """Voxels with sum(((v - c) / (a + grow))**2) <= 1."""
        grids = np.ogrid[tuple(slice(0, s) for s in shape)]
        r2 = sum(((g - c) / (a + grow)) ** 2 for g, c, a in zip(grids, self.center, self.semi_axes))
        return r2 <= 1.0

    def inside(self, shape) -> bool:
        return all(c - a > 0 and c + a < s - 1 for c, a, s in zip(self.center, self.semi_axes, shape))


@dataclass(frozen=True)
class PhantomSpec:
    volume_size: tuple = (96, 96, 96)
    spacing: tuple = (1.0, 1.0, 1.0)
    structures: tuple = field(default=())  # 14 Ellipsoids, class c at index c - 1
    background: float = 100.0
    brain_semi_axes: tuple = (40.0, 40.0, 40.0)
    noise_sigma: float = 5.0
    atlas_blur: int = 1
    seed: int = 0

    def __post_init__(self):
        if len(self.structures) != N_CLASSES - 1:
            raise ValueError(f"need {N_CLASSES - 1} structures, got {len(self.structures)}")
        if self.noise_sigma < 0 or self.atlas_blur < 0:
            raise ValueError("noise_sigma and atlas_blur must be non-negative")
        for c, e in enumerate(self.structures, start=1):
            if abs(e.intensity - self.background) < 2 * self.noise_sigma:
                raise ValueError(f"class {c} intensity {e.intensity} within 2 sigma of background")

    @property
    def center(self) -> tuple:
        return tuple((s - 1) / 2.0 for s in self.volume_size)


def default_spec(size: int = 96, seed: int = 0) -> PhantomSpec:
    """The reference layout on a ``size``^3 grid (structures keep their voxel size)."""
    cx, cy, cz = ((size - 1) / 2.0,) * 3
    structures = [None] * (N_CLASSES - 1)
    for k, ((dx, dy, dz), axes, level) in enumerate(_LAYOUT):
        structures[2 * k] = Ellipsoid((cx + dx, cy + dy, cz + dz), axes, level)
        structures[2 * k + 1] = Ellipsoid((cx - dx, cy + dy, cz + dz), axes, level)
    brain = (0.42 * size,) * 3
    return PhantomSpec((size,) * 3, (1.0, 1.0, 1.0), tuple(structures), brain_semi_axes=brain, seed=seed)


def label_map(spec: PhantomSpec) -> np.ndarray:
    """Ellipsoid membership as uint8 labels; raises on overlap or out-of-bounds structures."""
    labels = np.zeros(spec.volume_size, np.uint8)
    for c, e in enumerate(spec.structures, start=1):
        if not e.inside(spec.volume_size):
            raise StructureOutOfBounds(f"class {c} ellipsoid {e} not strictly inside {spec.volume_size}")
        m = e.mask(spec.volume_size)
        clash = labels[m]
        if clash.any():
            raise OverlappingStructures(f"class {c} overlaps class {int(clash[clash > 0][0])}")
        labels[m] = c
    return labels


def _box_counts(indicator: np.ndarray, passes: int) -> np.ndarray:
    # integer 3x3x3 box sums keep voxels far from the support exactly zero
    counts = indicator.astype(np.int64)
    for _ in range(passes):
        for axis in range(3):
            counts = ndimage.correlate1d(counts, [1, 1, 1], axis=axis, mode="constant")
    return counts


def atlas_map(spec: PhantomSpec) -> np.ndarray:
    """Soft priors (x, y, z, 15): blurred indicators of slightly grown ellipsoids."""
    scale = 27.0 ** spec.atlas_blur
    channels = np.empty(spec.volume_size + (N_CLASSES - 1,), np.float64)
    for c, e in enumerate(spec.structures):
        channels[..., c] = _box_counts(e.mask(spec.volume_size, ATLAS_GROWTH), spec.atlas_blur) / scale
    return normalize_priors(channels)


def generate(spec: PhantomSpec, with_atlas: bool = True) -> tuple:
    """``(image, labels, atlas)`` for one subject; atlas is None when not requested."""
    labels = label_map(spec)
    brain = ndimage.binary_fill_holes(
        Ellipsoid(spec.center, spec.brain_semi_axes, spec.background).mask(spec.volume_size) | (labels > 0))
    levels = np.array([spec.background] + [e.intensity for e in spec.structures])
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, spec.noise_sigma, size=spec.volume_size)
    image = np.where(brain, levels[labels] + noise, 0.0)
    # keep the brain strictly nonzero so it can be recovered from the image
    image[brain & (image == 0)] = np.finfo(np.float64).tiny

    image_vol = ScalarVolume.from_array(image, spec.spacing)
    label_vol = LabelVolume.from_array(labels, spec.spacing)
    atlas_vol = AtlasVolume.from_array(atlas_map(spec), spec.spacing) if with_atlas else None
    return image_vol, label_vol, atlas_vol


def _gap_ok(mask: np.ndarray, occupied: np.ndarray) -> bool:
    # at least one voxel of clearance in every direction (26-neighbourhood)
    grown = ndimage.binary_dilation(mask, structure=np.ones((3, 3, 3), bool))
    return not np.any(grown & occupied)


def jittered_spec(base: PhantomSpec, seed: int) -> PhantomSpec:
    """A subject variant: every centre moves by a random vector of length <= 3 voxels
    and every intensity is scaled by a factor in [0.95, 1.05].

    Offsets are drawn structure by structure and redrawn until the structure
    stays inside the volume with a one-voxel gap to those already placed.
    """
    rng = np.random.default_rng(seed)
    occupied = np.zeros(base.volume_size, bool)
    placed = []
    for c, e in enumerate(base.structures, start=1):
        for _ in range(1000):
            offset = rng.uniform(-JITTER_RADIUS, JITTER_RADIUS, size=3)
            if np.linalg.norm(offset) > JITTER_RADIUS:
                continue
            moved = replace(e, center=tuple(float(v) for v in np.asarray(e.center) + offset))
            if not moved.inside(base.volume_size):
                continue
            m = moved.mask(base.volume_size)
            if _gap_ok(m, occupied):
                break
        else:
            raise OverlappingStructures(f"could not place class {c} without touching its neighbours")
        occupied |= m
        factor = rng.uniform(1.0 - INTENSITY_JITTER, 1.0 + INTENSITY_JITTER)
        placed.append(replace(moved, intensity=float(e.intensity * factor)))
    return replace(base, structures=tuple(placed), seed=int(rng.integers(2 ** 63)))


def subject_seeds(n_subjects: int, seed: int) -> list:
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n_subjects)]


def default_dataset(n_subjects: int, seed: int = 0, size: int = 96) -> list:
    """``n_subjects`` jittered phantoms sharing one atlas built from subject 0."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    base = default_spec(size)
    specs = [jittered_spec(base, s) for s in subject_seeds(n_subjects, seed)]
    subjects = [generate(s, with_atlas=False) for s in specs]
    atlas = AtlasVolume.from_array(atlas_map(specs[0]), base.spacing)
    return [(image, labels, atlas) for image, labels, _ in subjects]


def write_dataset(dataset: list, out_dir) -> list:
    """Write ``subjNN_t1.nii``/``subjNN_labels.nii`` per subject and ``atlas.nii``.

    Subjects are numbered from 01.  Returns the written paths.
    """
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    paths = []
    for i, (image, labels, _) in enumerate(dataset, start=1):
        for suffix, vol in (("t1", image), ("labels", labels)):
            path = out / f"subj{i:02d}_{suffix}.nii"
            write_volume(vol, path)
            paths.append(path)
    path = out / "atlas.nii"
    write_volume(dataset[0][2], path)
    paths.append(path)
    return paths
