"""Synthetic volumes with ellipsoidal ROIs, image-level labels and splits.

Arrays are indexed ``[x, y, z]``.  Mask classes: 0 background, 1 organ,
2 ROI.  The image-level label is 1 iff any voxel is class 2.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .errors import ParameterError

DEFAULT_DIMS = (64, 64, 32)
ROI_SEMI_AXIS_RANGE = (2.0, 12.0)
ROI_OFFSET_RANGE = (0.15, 0.4)
NOISE_SIGMA = 0.05
# offsets are subtracted: ROIs are darker than the organ, as hypodense lesions are
ROI_SIGNS = (-1.0,)
ORGAN_SEMI_AXIS_FRACTION = (0.46, 0.5)
ORGAN_POWER_RANGE = (4.0, 5.0)
# ROI centres are drawn where the organ's super-ellipsoid radius is below this
ROI_CENTRE_RADIUS = 0.6
ROI_BASE_SIZE = (8.0, 12.0)
BACKGROUND_LEVEL = (0.89, 0.91)
ORGAN_LEVEL = (0.49, 0.51)
MAX_ROIS = 12


@dataclass
class Case:
    id: str
    volume: np.ndarray
    mask: np.ndarray
    label: int
    meta: dict = field(default_factory=dict)

    @property
    def dims(self):
        return self.volume.shape


@dataclass
class DatasetSplit:
    development: list
    test: list


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ParameterError(f"dims must be three integers >= 16, got {dims}")
    return dims


def generate_synthetic_case(seed, dims=DEFAULT_DIMS, roi_count_range=(0, 3)):
    """Return ``(volume, mask, label)`` for one synthetic case.

    The organ is a box-like super-ellipsoid filling most of the volume at
    intensity ~0.5 on a bright (~0.9) surround.  Each ROI is an ellipsoid
    (semi-axes 2-12 voxels) clipped to the organ and darker than it by
    0.15-0.4 (see ``ROI_SIGNS``).  Gaussian noise (sigma 0.05) is added and
    intensities are clipped to [0, 1].
    """
    dims = _check_dims(dims)
    lo, hi = (int(v) for v in roi_count_range)
    if not 0 <= lo <= hi <= MAX_ROIS:
        raise ParameterError(f"roi_count_range must satisfy 0 <= lo <= hi <= {MAX_ROIS}, got {roi_count_range}")
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    coords = (x, y, z)

    centre = np.array(dims, float) / 2 - 0.5 + rng.uniform(-0.02, 0.02, 3) * np.array(dims)
    semi = np.array(dims, float) * rng.uniform(*ORGAN_SEMI_AXIS_FRACTION, 3)
    power = rng.uniform(*ORGAN_POWER_RANGE)
    organ_r = sum(np.abs((c - m) / s) ** power for c, m, s in zip(coords, centre, semi))
    organ = organ_r <= 1.0

    background = rng.uniform(*BACKGROUND_LEVEL)
    organ_level = rng.uniform(*ORGAN_LEVEL)
    vol = np.full(dims, background)
    vol[organ] = organ_level

    mask = organ.astype(np.uint8)
    k = int(rng.integers(lo, hi + 1))
    # ROI centres are kept well inside the organ so the clipped ROI keeps its bulk
    inner = np.argwhere(organ_r <= ROI_CENTRE_RADIUS ** power)
    rois = []
    for _ in range(k):
        c = inner[rng.integers(len(inner))].astype(float)
        axes = np.clip(rng.uniform(*ROI_BASE_SIZE) * rng.uniform(0.75, 1.25, 3), *ROI_SEMI_AXIS_RANGE)
        sign = ROI_SIGNS[int(rng.integers(len(ROI_SIGNS)))]
        offset = sign * rng.uniform(*ROI_OFFSET_RANGE)
        ell = sum(((q - m) / a) ** 2 for q, m, a in zip(coords, c, axes)) <= 1.0
        roi = ell & organ
        vol[roi] = organ_level + offset
        mask[roi] = 2
        rois.append({"centre": c.tolist(), "semi_axes": axes.tolist(), "offset": float(offset)})

    vol = vol + rng.normal(0.0, NOISE_SIGMA, dims)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    label = derive_image_label(mask)
    return vol, mask, label


def derive_image_label(mask) -> int:
    return int(np.any(np.asarray(mask) == 2))


def case_seeds(seed, n):
    """Independent per-case seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_dataset(n_cases, seed, dims=DEFAULT_DIMS, roi_count_range=(1, 3), positive_fraction=0.5):
    """Generate ``n_cases`` cases; the first ``round(n * positive_fraction)``
    (before any shuffling by :func:`split_dataset`) carry ROIs."""
    if n_cases < 1:
        raise ParameterError("n_cases must be positive")
    lo, hi = roi_count_range
    n_pos = int(round(n_cases * positive_fraction))
    cases = []
    for i, s in enumerate(case_seeds(seed, n_cases)):
        rng_range = (max(1, lo), max(1, hi)) if i < n_pos else (0, 0)
        vol, mask, label = generate_synthetic_case(s, dims, rng_range)
        cases.append(Case(f"case{i:04d}", vol, mask, label, {"seed": s}))
    return cases


def split_dataset(case_ids, ratio=(3, 2), seed=0, labels=None) -> DatasetSplit:
    """Shuffle deterministically and cut into development/test by ``ratio``.

    The test share is rounded down so development gets the remainder.  With
    ``labels`` each label group is cut separately, so both sides keep the
    overall class balance.
    """
    ids = list(case_ids)
    if not ids:
        raise ParameterError("cannot split an empty case list")
    a, b = (int(v) for v in ratio)
    if a < 0 or b < 0 or a + b == 0:
        raise ParameterError(f"invalid ratio {ratio}")
    if labels is None:
        groups = [ids]
    else:
        labels = list(labels)
        if len(labels) != len(ids):
            raise ParameterError("labels and case_ids differ in length")
        groups = [[i for i, l in zip(ids, labels) if l == v] for v in sorted(set(labels))]
    rng = np.random.default_rng(seed)
    dev, test = [], []
    for g in groups:
        shuffled = [g[i] for i in rng.permutation(len(g))]
        n_test = (len(g) * b) // (a + b)
        dev += shuffled[: len(g) - n_test]
        test += shuffled[len(g) - n_test:]
    return DatasetSplit(development=dev, test=test)


# -- persistence ---------------------------------------------------------

def save_cases(cases, directory):
    """Write SPV1/SPM1 files plus ``manifest.json``; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in cases:
        vp, mp = f"{c.id}.spv", f"{c.id}.spm"
        formats.write_volume(directory / vp, c.volume)
        formats.write_mask(directory / mp, c.mask)
        entries.append({"id": c.id, "volume_path": vp, "mask_path": mp, "label": c.label})
    path = directory / "manifest.json"
    path.write_text(json.dumps(entries, indent=1))
    return path


def load_cases(manifest_path):
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    cases = []
    for e in entries:
        vol = formats.read_volume(manifest_path.parent / e["volume_path"])
        mask = formats.read_mask(manifest_path.parent / e["mask_path"])
        if vol.shape != mask.shape:
            raise ParameterError(f"case {e['id']}: volume {vol.shape} and mask {mask.shape} differ")
        cases.append(Case(e["id"], vol, mask, int(e["label"])))
    return cases
