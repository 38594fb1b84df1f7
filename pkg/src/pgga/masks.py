"""Keypoint extraction and attention-mask geometry on the H/8 feature grid.

Thirteen body parts in a fixed order produce one coarse body mask (six
closed regions: head square, torso hull, four thickened limb polylines)
and thirteen per-part square masks scaled by detection confidence.

Region membership is boundary-inclusive with a 1e-9 snap tolerance so that
rasterization and the per-pixel geometric reference decide borderline
integer-geometry cases identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "PART_NAMES",
    "FLIP_PAIRS",
    "LIMB_CHAINS",
    "TORSO_PARTS",
    "BOUNDARY_TOL",
    "Keypoint",
    "KeypointSet",
    "Heatmap",
    "AttentionMask",
    "MaskParams",
    "extract_keypoints",
    "square_area",
    "coarse_mask",
    "fine_masks",
    "downsample_mask",
    "read_heatmap",
    "write_heatmap",
    "write_mask_pgm",
]

PART_NAMES = (
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_hand",
    "r_hand",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_foot",
    "r_foot",
)
NUM_PARTS = len(PART_NAMES)

# left/right index pairs swapped by a horizontal mirror
FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12))

# (shoulder, elbow, hand) and (hip, knee, foot) chains
LIMB_CHAINS = ((1, 3, 5), (2, 4, 6), (7, 9, 11), (8, 10, 12))

# quadrilateral, in part order: L-shoulder, R-shoulder, R-hip, L-hip
TORSO_PARTS = (1, 2, 8, 7)

BOUNDARY_TOL = 1e-9


class Keypoint(NamedTuple):
    row: int
    col: int
    conf: float


@dataclass
class KeypointSet:
    """Thirteen detected part locations with confidences, in PART_NAMES order."""

    entries: tuple[Keypoint, ...]

    def __post_init__(self):
        if len(self.entries) != NUM_PARTS:
            raise ValueError(f"expected {NUM_PARTS} keypoints, got {len(self.entries)}")
        self.entries = tuple(Keypoint(int(k[0]), int(k[1]), float(k[2])) for k in self.entries)

    def __getitem__(self, i: int) -> Keypoint:
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)


@dataclass
class Heatmap:
    """13 x Hm x Wm per-part probability grids, values in [0, 1]."""

    maps: np.ndarray

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float64)
        if maps.ndim != 3 or maps.shape[0] != NUM_PARTS:
            raise ValueError(f"heatmap must be {NUM_PARTS} x Hm x Wm, got shape {maps.shape}")
        if maps.min() < 0.0 or maps.max() > 1.0:
            raise ValueError("heatmap values must lie in [0, 1]")
        self.maps = maps

    @property
    def bounds(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass
class AttentionMask:
    """A weight grid over feature-map coordinates."""

    grid: np.ndarray
    inside_value: float
    outside_value: float


@dataclass
class MaskParams:
    """Expansion radius and the attention/background weight pair."""

    omega: int = 2
    alpha: float = 2.0
    beta: float = 0.5

    def __post_init__(self):
        if self.omega < 0 or int(self.omega) != self.omega:
            raise ValueError(f"omega must be a nonnegative integer, got {self.omega}")
        self.omega = int(self.omega)
        if self.inside_value <= self.beta:
            raise ValueError(
                f"alpha*(1-beta)={self.inside_value} must exceed beta={self.beta}"
            )

    @property
    def inside_value(self) -> float:
        return self.alpha * (1.0 - self.beta)


def extract_keypoints(h: Heatmap) -> KeypointSet:
    """Per-channel argmax location (first row-major cell on ties) and its value."""
    _, Hm, Wm = h.maps.shape
    entries = []
    for ch in range(NUM_PARTS):
        flat = int(h.maps[ch].argmax())
        entries.append(Keypoint(flat // Wm, flat % Wm, float(h.maps[ch].reshape(-1)[flat])))
    return KeypointSet(tuple(entries))


def square_area(loc: tuple[int, int], omega: int, bounds: tuple[int, int]) -> set[tuple[int, int]]:
    """Pixels within Chebyshev radius omega of loc, clamped to the grid."""
    row, col = int(loc[0]), int(loc[1])
    Hm, Wm = bounds
    if not (0 <= row < Hm and 0 <= col < Wm):
        raise ValueError(f"location {(row, col)} outside {Hm}x{Wm} grid")
    r0, r1 = max(0, row - omega), min(Hm - 1, row + omega)
    c0, c1 = max(0, col - omega), min(Wm - 1, col + omega)
    return {(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)}


def _clamped_rect(kp: Keypoint, omega: int, bounds: tuple[int, int]) -> tuple[int, int, int, int]:
    Hm, Wm = bounds
    return (
        max(0, kp.row - omega),
        min(Hm - 1, kp.row + omega),
        max(0, kp.col - omega),
        min(Wm - 1, kp.col + omega),
    )


def _fill_rect(region: np.ndarray, rect: tuple[int, int, int, int]) -> None:
    r0, r1, c0, c1 = rect
    region[r0 : r1 + 1, c0 : c1 + 1] = True


def _cross(o, a, b) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _convex_hull(points: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    """Monotone chain on integer points; collinear boundary points dropped."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    return hull if len(hull) >= 3 else pts


def _fill_segment_pixels(region: np.ndarray, a: tuple[int, int], b: tuple[int, int]) -> None:
    """Integer lattice points exactly on segment a-b (degenerate hull case)."""
    r0, r1 = sorted((a[0], b[0]))
    c0, c1 = sorted((a[1], b[1]))
    for r in range(r0, r1 + 1):
        for c in range(c0, c1 + 1):
            if _cross(a, b, (r, c)) == 0:
                region[r, c] = True


def _fill_hull(region: np.ndarray, points: Sequence[tuple[int, int]]) -> None:
    """Scanline fill of the convex hull of integer points, boundary inclusive."""
    hull = _convex_hull(points)
    if len(hull) == 1:
        region[hull[0]] = True
        return
    if len(hull) == 2:
        _fill_segment_pixels(region, hull[0], hull[1])
        return
    rows = [p[0] for p in hull]
    Wm = region.shape[1]
    edges = list(zip(hull, hull[1:] + hull[:1]))
    for r in range(min(rows), max(rows) + 1):
        xs = []
        for (y0, x0), (y1, x1) in edges:
            if y0 == y1:
                if y0 == r:
                    xs.extend((x0, x1))
            elif min(y0, y1) <= r <= max(y0, y1):
                t = (r - y0) / (y1 - y0)
                xs.append(x0 + t * (x1 - x0))
        if not xs:
            continue
        c0 = max(0, int(np.ceil(min(xs) - BOUNDARY_TOL)))
        c1 = min(Wm - 1, int(np.floor(max(xs) + BOUNDARY_TOL)))
        if c0 <= c1:
            region[r, c0 : c1 + 1] = True


def _segment_band(bounds: tuple[int, int], a: Keypoint, b: Keypoint, radius: float) -> np.ndarray:
    """Pixels whose Chebyshev distance to segment a-b is within ``radius``.

    Equivalent formulation used here: the segment intersects the axis-aligned
    square of half-width ``radius`` centered on the pixel (Liang-Barsky clip),
    which keeps this route independent of the distance-minimizing reference.
    """
    Hm, Wm = bounds
    R, C = np.meshgrid(np.arange(Hm, dtype=float), np.arange(Wm, dtype=float), indexing="ij")
    dr = float(b.row - a.row)
    dc = float(b.col - a.col)
    t0 = np.zeros(bounds)
    t1 = np.ones(bounds)
    feasible = np.ones(bounds, dtype=bool)
    sides = (
        (-dr, a.row - (R - radius)),
        (dr, (R + radius) - a.row),
        (-dc, a.col - (C - radius)),
        (dc, (C + radius) - a.col),
    )
    for p, q in sides:
        if p == 0.0:
            feasible &= q >= 0.0
        elif p < 0.0:
            np.maximum(t0, q / p, out=t0)
        else:
            np.minimum(t1, q / p, out=t1)
    return feasible & (t0 <= t1)


def _coarse_region(kps: KeypointSet, omega: int, bounds: tuple[int, int]) -> np.ndarray:
    region = np.zeros(bounds, dtype=bool)
    _fill_rect(region, _clamped_rect(kps[0], omega, bounds))
    corners = []
    for part in TORSO_PARTS:
        r0, r1, c0, c1 = _clamped_rect(kps[part], omega, bounds)
        corners.extend(((r0, c0), (r0, c1), (r1, c0), (r1, c1)))
    _fill_hull(region, corners)
    radius = omega + BOUNDARY_TOL
    for chain in LIMB_CHAINS:
        for part in chain:
            _fill_rect(region, _clamped_rect(kps[part], omega, bounds))
        for a, b in zip(chain, chain[1:]):
            region |= _segment_band(bounds, kps[a], kps[b], radius)
    return region


def _check_keypoints_in_bounds(kps: KeypointSet, bounds: tuple[int, int]) -> None:
    Hm, Wm = bounds
    for name, kp in zip(PART_NAMES, kps):
        if not (0 <= kp.row < Hm and 0 <= kp.col < Wm):
            raise ValueError(f"keypoint {name} at {(kp.row, kp.col)} outside {Hm}x{Wm} grid")


def coarse_mask(kps: KeypointSet, params: MaskParams, bounds: tuple[int, int]) -> AttentionMask:
    """Single body mask: attention cells get alpha*(1-beta), the rest beta."""
    _check_keypoints_in_bounds(kps, bounds)
    region = _coarse_region(kps, params.omega, bounds)
    grid = np.where(region, params.inside_value, params.beta)
    return AttentionMask(grid, params.inside_value, params.beta)


def fine_masks(kps: KeypointSet, params: MaskParams, bounds: tuple[int, int]) -> list[AttentionMask]:
    """Thirteen per-part square masks with confidence-scaled interiors."""
    _check_keypoints_in_bounds(kps, bounds)
    out = []
    for kp in kps:
        inside = kp.conf * params.inside_value
        grid = np.full(bounds, params.beta)
        r0, r1, c0, c1 = _clamped_rect(kp, params.omega, bounds)
        grid[r0 : r1 + 1, c0 : c1 + 1] = inside
        out.append(AttentionMask(grid, inside, params.beta))
    return out


def downsample_mask(mask: AttentionMask | np.ndarray) -> np.ndarray:
    """Exact factor-2 area interpolation: each output cell averages a 2x2 block."""
    grid = mask.grid if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=np.float64)
    Hm, Wm = grid.shape
    if Hm % 2 or Wm % 2:
        raise ValueError(f"mask dimensions must be even for factor-2 downsampling, got {Hm}x{Wm}")
    return grid.reshape(Hm // 2, 2, Wm // 2, 2).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# file formats

_HMAP_MAGIC = b"HMAP"


def write_heatmap(path: str | Path, h: Heatmap) -> None:
    """HMAP file: magic, u32 Hm/Wm/channels, float32 LE values channel-major."""
    _, Hm, Wm = h.maps.shape
    payload = h.maps.astype("<f4").tobytes()
    Path(path).write_bytes(_HMAP_MAGIC + struct.pack("<III", Hm, Wm, NUM_PARTS) + payload)


def read_heatmap(path: str | Path) -> Heatmap:
    blob = Path(path).read_bytes()
    if blob[:4] != _HMAP_MAGIC:
        raise ValueError(f"{path}: bad heatmap magic")
    Hm, Wm, channels = struct.unpack_from("<III", blob, 4)
    if channels != NUM_PARTS:
        raise ValueError(f"{path}: expected {NUM_PARTS} channels, got {channels}")
    n = channels * Hm * Wm
    if len(blob) != 16 + 4 * n:
        raise ValueError(f"{path}: truncated heatmap payload")
    maps = np.frombuffer(blob, dtype="<f4", count=n, offset=16).reshape(channels, Hm, Wm)
    return Heatmap(maps.astype(np.float64))


def write_mask_pgm(path: str | Path, grid: np.ndarray, lo: float, hi: float) -> None:
    """Binary PGM with values mapped linearly [lo, hi] -> [0, 255], clamped."""
    grid = np.asarray(grid, dtype=np.float64)
    scaled = np.clip(np.rint(255.0 * (grid - lo) / (hi - lo)), 0, 255).astype(np.uint8)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + scaled.tobytes())
