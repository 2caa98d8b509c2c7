"""Multi-modal volume data model, normalization, and nested-region masks.

Grids are float32 with float64 accumulators for statistics; label grids
are uint8 over {0, 1, 2, 4}.  Modality order is fixed as
[T1, T1ce, T2, FLAIR] so checkpoints stay portable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyBrainMask

logger = logging.getLogger(__name__)

MODALITIES = ("T1", "T1ce", "T2", "FLAIR")
LABEL_VALUES = (0, 1, 2, 4)
WT_LABELS = (1, 2, 4)
TC_LABELS = (1, 4)
ET_LABELS = (4,)
REGIONS = ("WT", "TC", "ET")


@dataclass
class MultiModalVolume:
    """Four co-registered scalar grids, shape (4, D, H, W), spacing in mm."""

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != len(MODALITIES):
            raise DimensionMismatch(f"expected (4, D, H, W) grid, got {self.data.shape}")
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        if self.spacing.shape != (3,) or not (self.spacing > 0).all():
            raise DimensionMismatch(f"spacing must be 3 positive floats, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def brain_mask(self) -> np.ndarray:
        """Voxels where any modality is non-zero."""
        return (self.data != 0).any(axis=0)


@dataclass
class LabelVolume:
    """Segmentation grid over {0, 1, 2, 4}."""

    labels: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise DimensionMismatch(f"expected (D, H, W) label grid, got {self.labels.shape}")
        bad = ~np.isin(self.labels, LABEL_VALUES)
        if bad.any():
            raise DimensionMismatch(
                f"labels outside {{0,1,2,4}}: found {sorted(np.unique(self.labels[bad]).tolist())}"
            )
        self.labels = self.labels.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass
class RegionMaskSet:
    """Nested evaluation masks: et ⊆ tc ⊆ wt."""

    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __post_init__(self):
        for name in ("wt", "tc", "et"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        if not (self.wt.shape == self.tc.shape == self.et.shape):
            raise DimensionMismatch("region masks disagree on shape")
        if (self.et & ~self.tc).any() or (self.tc & ~self.wt).any():
            raise DimensionMismatch("region masks violate et ⊆ tc ⊆ wt")

    def by_region(self, region: str) -> np.ndarray:
        return {"WT": self.wt, "TC": self.tc, "ET": self.et}[region.upper()]


def znormalize_nonzero(vol: MultiModalVolume) -> MultiModalVolume:
    """Per modality: map the non-zero voxels to zero mean / unit std;
    zero voxels stay exactly zero so the brain mask survives.

    A modality whose non-zero voxels have (near-)zero spread is mapped to
    all zeros rather than blown up.
    """
    out = np.zeros_like(vol.data)
    for m in range(vol.data.shape[0]):
        grid = vol.data[m]
        mask = grid != 0
        n = int(mask.sum())
        if n < 2:
            raise EmptyBrainMask(f"modality {MODALITIES[m]} has {n} non-zero voxels")
        values = grid[mask].astype(np.float64)
        mean = values.mean()
        std = values.std()
        if std < 1e-8:
            logger.warning(
                "degenerate modality %s (std=%.3g): mapping non-zero voxels to 0",
                MODALITIES[m], std,
            )
            continue
        out[m][mask] = ((values - mean) / std).astype(np.float32)
    return MultiModalVolume(out, spacing=vol.spacing, subject_id=vol.subject_id)


def region_masks(labels: LabelVolume | np.ndarray) -> RegionMaskSet:
    """WT = {1,2,4}, TC = {1,4}, ET = {4}."""
    grid = labels.labels if isinstance(labels, LabelVolume) else np.asarray(labels)
    return RegionMaskSet(
        wt=np.isin(grid, WT_LABELS),
        tc=np.isin(grid, TC_LABELS),
        et=grid == 4,
    )


def one_hot_labels(labels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(D,H,W) labels over {0,1,2,4} -> (4,D,H,W) one-hot channels."""
    out = np.zeros((len(LABEL_VALUES),) + labels.shape, dtype=dtype)
    for ch, value in enumerate(LABEL_VALUES):
        out[ch] = labels == value
    return out


def labels_from_channel_index(idx: np.ndarray) -> np.ndarray:
    """Channel index {0,1,2,3} -> label value {0,1,2,4}."""
    lut = np.array(LABEL_VALUES, dtype=np.uint8)
    return lut[idx]
