"""Training-free contrastive-region machinery: per-layer feature
discrepancies, region anchors, refinement masks, and region pooling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POOL_EPSILON = 1e-6


@dataclass(frozen=True)
class RegionSpec:
    """A named set of visual-token indices (0-based)."""

    k: int
    indices: tuple[int, ...]
    label: str = "custom"  # foreground / boundary / background / custom

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ValueError(f"region {self.k} has an empty index set")
        object.__setattr__(self, "indices", tuple(sorted(int(i) for i in self.indices)))


@dataclass
class RegionAnchor:
    """Centroid of in-region discrepancies and its unit direction.

    When the centroid norm is zero the direction is the zero vector and
    the downstream mask is empty, so the injection degrades to a no-op.
    """

    c: np.ndarray
    d: np.ndarray
    norm: float


@dataclass
class LayerRegionState:
    """Per-layer mask rows and pooled tokens for all regions."""

    masks: np.ndarray          # (K, N) binary
    pooled: np.ndarray         # (K, D)
    anchors: list[RegionAnchor] = field(default_factory=list)


def grid_partition(side: int) -> list[RegionSpec]:
    """Foreground / boundary / background partition of a side x side grid.

    The inner block is foreground, the four corners are background, and
    the remaining ring is boundary.  For the default 4x4 grid this gives
    the inner 2x2, the 8-token ring, and the 4 corners.
    """
    fg, bg, ring = [], [], []
    for r in range(side):
        for c in range(side):
            i = r * side + c
            on_edge_r = r in (0, side - 1)
            on_edge_c = c in (0, side - 1)
            if on_edge_r and on_edge_c:
                bg.append(i)
            elif on_edge_r or on_edge_c:
                ring.append(i)
            else:
                fg.append(i)
    return [RegionSpec(0, tuple(fg), "foreground"),
            RegionSpec(1, tuple(ring), "boundary"),
            RegionSpec(2, tuple(bg), "background")]


def compute_cgp(orig: np.ndarray, counterpart: np.ndarray) -> np.ndarray:
    """Contrastive gradient proxy: counterpart minus original, per token."""
    orig = np.asarray(orig, dtype=np.float64)
    counterpart = np.asarray(counterpart, dtype=np.float64)
    if orig.shape != counterpart.shape:
        raise ValueError(f"shape mismatch {orig.shape} vs {counterpart.shape}")
    return counterpart - orig


def anchor(cgp: np.ndarray, region: RegionSpec) -> RegionAnchor:
    """Region anchor: centroid of in-region discrepancies, unit direction."""
    c = cgp[list(region.indices)].mean(axis=0)
    norm = float(np.linalg.norm(c))
    d = c / norm if norm > 0.0 else np.zeros_like(c)
    return RegionAnchor(c, d, norm)


def refine_mask(cgp: np.ndarray, anch: RegionAnchor, region: RegionSpec,
                alpha: float) -> np.ndarray:
    """Binary mask row: in-region tokens whose projection onto the anchor
    direction strictly exceeds alpha * ||c||.  Tokens outside the region
    are always masked out; a degenerate anchor yields an empty mask."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    n_tokens = cgp.shape[0]
    mask = np.zeros(n_tokens)
    if anch.norm == 0.0:
        return mask
    proj = cgp @ anch.d
    thresh = alpha * anch.norm
    for i in region.indices:
        if proj[i] > thresh:
            mask[i] = 1.0
    return mask


def pool(visuals: np.ndarray, mask_row: np.ndarray,
         epsilon: float = POOL_EPSILON) -> np.ndarray:
    """Masked average of visual tokens; empty mask pools to exactly zero."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    num = (mask_row[:, None] * visuals).sum(axis=0)
    return num / (mask_row.sum() + epsilon)


def layer_region_state(cgp: np.ndarray, visuals: np.ndarray,
                       regions: list[RegionSpec], alpha: float,
                       epsilon: float = POOL_EPSILON) -> LayerRegionState:
    """Full per-layer pass: anchors, masks, pooled tokens for every region."""
    anchors, masks, pooled = [], [], []
    for reg in regions:
        a = anchor(cgp, reg)
        m = refine_mask(cgp, a, reg, alpha)
        anchors.append(a)
        masks.append(m)
        pooled.append(pool(visuals, m, epsilon))
    return LayerRegionState(np.array(masks), np.array(pooled), anchors)


def masks_to_csv(per_layer_masks: list[np.ndarray], path) -> None:
    """Dump masks as CSV rows (layer, region, token_index, bit)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("layer,region,token_index,bit\n")
        for l, masks in enumerate(per_layer_masks):
            for k in range(masks.shape[0]):
                for i in range(masks.shape[1]):
                    fh.write(f"{l},{k},{i},{int(masks[k, i])}\n")
