"""CT processing around the network: HU windowing, 3-channel slice stacking,
probabilistic slice sampling, flip augmentation, thresholding, 3-D connected
components, bounding boxes, and the two-stage mask merge.

All functions here operate on plain numpy arrays in (z, y, x) axis order;
slices are (H, W) = (ny, nx) images.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

HU_WINDOW = (-200.0, 250.0)


class EmptyMaskError(ValueError):
    pass


def hu_window_normalize(voxels: np.ndarray) -> np.ndarray:
    """Clamp HU values to [-200, 250] and map that window affinely onto [0, 1].

    The window is fixed, not per-slice, so intensities stay comparable
    across slices and volumes.
    """
    lo, hi = HU_WINDOW
    x = np.asarray(voxels, dtype=np.float32)
    return (np.clip(x, lo, hi) - lo) / (hi - lo)


def stack_adjacent_slices(volume: np.ndarray, z: int) -> np.ndarray:
    """[nz,H,W] -> [3,H,W] with channels (z-1, z, z+1), edges replicated."""
    nz = volume.shape[0]
    if not 0 <= z < nz:
        raise IndexError(f"slice index {z} out of range for nz={nz}")
    lo = max(z - 1, 0)
    hi = min(z + 1, nz - 1)
    return np.stack([volume[lo], volume[z], volume[hi]])


@dataclass
class SliceSample:
    """One training sample: a 3-channel normalized image, its binary target,
    the source slice index, and whether the target contains any foreground."""

    image: np.ndarray      # [3, H, W] float32 in [0, 1]
    target: np.ndarray     # [1, H, W] float32 in {0, 1}
    z_index: int
    is_positive: bool


def sample_slices(image_volume: np.ndarray, target_volume: np.ndarray, seed,
                  p_pos: float = 0.9, p_neg: float = 0.1,
                  eligible: np.ndarray | None = None) -> list[SliceSample]:
    """Keep each slice independently with probability p_pos if its target
    contains foreground, else p_neg; deterministic for a given seed.

    One uniform draw is consumed per slice in ascending z, whether or not the
    slice is eligible, so the kept pattern does not depend on the eligibility
    mask.  The returned list is in ascending z order.
    """
    if image_volume.shape != target_volume.shape:
        raise ValueError(
            f"volume dims mismatch: image {image_volume.shape} vs target {target_volume.shape}")
    rng = np.random.default_rng(seed)
    out = []
    for z in range(image_volume.shape[0]):
        u = rng.random()
        if eligible is not None and not eligible[z]:
            continue
        positive = bool(target_volume[z].any())
        if u < (p_pos if positive else p_neg):
            out.append(SliceSample(
                image=stack_adjacent_slices(image_volume, z).astype(np.float32),
                target=target_volume[z][None].astype(np.float32),
                z_index=z,
                is_positive=positive,
            ))
    return out


def flip_augment(sample: SliceSample, rng: np.random.Generator) -> SliceSample:
    """Independently with probability 0.5 each, flip image and target along
    the width and/or height axes; the two always flip together."""
    flip_w = rng.random() < 0.5
    flip_h = rng.random() < 0.5
    image, target = sample.image, sample.target
    axes = []
    if flip_h:
        axes.append(1)
    if flip_w:
        axes.append(2)
    if axes:
        image = np.flip(image, axis=axes).copy()
        target = np.flip(target, axis=axes).copy()
    return SliceSample(image, target, sample.z_index, sample.is_positive)


def threshold_mask(prob: np.ndarray, t: float) -> np.ndarray:
    """Probability >= t becomes foreground."""
    return (np.asarray(prob) >= t).astype(np.uint8)


_OFFSETS_6 = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
_OFFSETS_26 = [(dz, dy, dx)
               for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
               if (dz, dy, dx) != (0, 0, 0)]


def connected_components_3d(mask: np.ndarray, connectivity: int = 6):
    """Label connected foreground components of a binary volume.

    Labels are 1..K in discovery order of an x-fastest scan (x, then y, then
    z); connectivity is 6 (face-adjacent) or 26.  Returns (labels int32,
    sizes int64 array where sizes[k-1] is the voxel count of label k).
    """
    if connectivity == 6:
        offsets = _OFFSETS_6
    elif connectivity == 26:
        offsets = _OFFSETS_26
    else:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    fg = np.asarray(mask).astype(bool)
    nz, ny, nx = fg.shape
    labels = np.zeros(fg.shape, dtype=np.int32)
    sizes = []
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not fg[z, y, x] or labels[z, y, x]:
                    continue
                label = len(sizes) + 1
                count = 0
                queue = deque([(z, y, x)])
                labels[z, y, x] = label
                while queue:
                    cz, cy, cx = queue.popleft()
                    count += 1
                    for dz, dy, dx in offsets:
                        pz, py, px = cz + dz, cy + dy, cx + dx
                        if (0 <= pz < nz and 0 <= py < ny and 0 <= px < nx
                                and fg[pz, py, px] and not labels[pz, py, px]):
                            labels[pz, py, px] = label
                            queue.append((pz, py, px))
                sizes.append(count)
    return labels, np.asarray(sizes, dtype=np.int64)


def largest_component(mask: np.ndarray, connectivity: int = 6) -> np.ndarray:
    """Keep only the largest component; ties go to the earliest-discovered
    label.  An empty mask stays empty."""
    labels, sizes = connected_components_3d(mask, connectivity)
    if sizes.size == 0:
        return np.zeros_like(np.asarray(mask), dtype=np.uint8)
    keep = int(np.argmax(sizes)) + 1
    return (labels == keep).astype(np.uint8)


@dataclass(frozen=True)
class Bbox3:
    """Inclusive axis-aligned voxel bounding box in (z, y, x) index order."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        for a, b in zip(self.lo, self.hi):
            if a > b:
                raise ValueError(f"bbox lo {self.lo} exceeds hi {self.hi}")

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    def contains_mask(self, mask: np.ndarray) -> bool:
        """True when every foreground voxel of ``mask`` lies inside the box."""
        outside = np.asarray(mask).astype(bool).copy()
        outside[self.slices()] = False
        return not outside.any()


def bbox_of_mask(mask: np.ndarray) -> Bbox3:
    """Tightest axis-aligned box containing every foreground voxel."""
    idx = np.nonzero(np.asarray(mask))
    if idx[0].size == 0:
        raise EmptyMaskError("cannot take the bounding box of an empty mask")
    lo = tuple(int(ax.min()) for ax in idx)
    hi = tuple(int(ax.max()) for ax in idx)
    return Bbox3(lo, hi)


def hierarchical_postprocess(liver_prob: np.ndarray, lesion_prob: np.ndarray,
                             liver_threshold: float = 0.5, lesion_threshold: float = 0.3,
                             connectivity: int = 6) -> np.ndarray:
    """Two-stage merge: threshold the liver probabilities at 0.5, keep the
    largest component, take its bounding box, and intersect the 0.3-threshold
    lesion mask with that box.  An empty liver yields an empty result."""
    liver_prob = np.asarray(liver_prob)
    lesion_prob = np.asarray(lesion_prob)
    if liver_prob.shape != lesion_prob.shape:
        raise ValueError(
            f"volume dims mismatch: liver {liver_prob.shape} vs lesion {lesion_prob.shape}")
    liver = largest_component(threshold_mask(liver_prob, liver_threshold), connectivity)
    final = np.zeros(liver_prob.shape, dtype=np.uint8)
    if not liver.any():
        return final
    box = bbox_of_mask(liver)
    lesion = threshold_mask(lesion_prob, lesion_threshold)
    sl = box.slices()
    final[sl] = lesion[sl]
    return final
