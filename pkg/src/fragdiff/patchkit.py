"""Sliding-window fragmentation of rasters and re-assembly of patch counts.

Rasters are 2-D grids of non-negative intensities (grayscale images, density
maps, or label maps). Patching is strictly deterministic: row-major within an
image, images in ascending id order, so patch ids are reproducible across
runs and machines.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FragdiffError

FGR_MAGIC = b"FGR1"


class RasterKind(enum.IntEnum):
    IMAGE_GRAY = 0
    DENSITY_MAP = 1
    LABEL_MAP = 2


@dataclass(frozen=True)
class Raster:
    """A 2-D grid of finite, non-negative float intensities."""

    values: np.ndarray
    kind: RasterKind = RasterKind.DENSITY_MAP

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise FragdiffError("bad-raster", f"expected non-empty 2-D grid, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise FragdiffError("bad-raster", "raster contains non-finite values")
        if self.kind in (RasterKind.DENSITY_MAP, RasterKind.LABEL_MAP) and np.any(v < 0):
            raise FragdiffError("bad-raster", f"{self.kind.name} values must be >= 0")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, order=True)
class PatchIndex:
    """Grid coordinates of one patch: zero-based (row, col) plus pixel offsets."""

    image_id: str
    row: int
    col: int
    top: int
    left: int

    @property
    def id(self) -> str:
        return f"{self.image_id}:{self.row}:{self.col}"


def parse_patch_id(patch_id: str) -> tuple[str, int, int]:
    """Split an ``image:row:col`` id back into its parts."""
    image_id, row, col = patch_id.rsplit(":", 2)
    return image_id, int(row), int(col)


def _padded_extent(size: int, window: int, stride: int) -> int:
    # smallest size' >= size with size' >= window and (size' - window) % stride == 0
    if size <= window:
        return window
    steps = -(-(size - window) // stride)  # ceil division
    return window + steps * stride


def slide_windows(
    raster: Raster,
    window: tuple[int, int],
    stride: tuple[int, int],
    pad: Optional[str] = "edge",
    image_id: str = "img",
) -> list[tuple[PatchIndex, Raster]]:
    """Cut a raster into fixed-size patches, left-to-right then top-to-bottom.

    ``pad``: "edge" replicates border pixels up to the next stride multiple;
    ``None`` rejects rasters whose extent does not fit the grid exactly.
    """
    wh, ww = window
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise FragdiffError("invalid-stride", f"stride must be >= 1, got {stride}")
    if wh < 1 or ww < 1:
        raise FragdiffError("invalid-window", f"window must be >= 1, got {window}")

    values = raster.values
    h, w = values.shape
    if pad is None:
        if h < wh or w < ww:
            raise FragdiffError("raster-too-small", f"raster {h}x{w} smaller than window {wh}x{ww}")
        if (h - wh) % sh != 0 or (w - ww) % sw != 0:
            raise FragdiffError(
                "raster-too-small",
                f"raster {h}x{w} does not tile with window {window} stride {stride} and pad=None",
            )
    elif pad == "edge":
        ph = _padded_extent(h, wh, sh)
        pw = _padded_extent(w, ww, sw)
        if ph != h or pw != w:
            values = np.pad(values, ((0, ph - h), (0, pw - w)), mode="edge")
    else:
        raise FragdiffError("invalid-pad", f"unknown pad policy {pad!r}")

    ph, pw = values.shape
    n_rows = (ph - wh) // sh + 1
    n_cols = (pw - ww) // sw + 1
    out = []
    for r in range(n_rows):
        for c in range(n_cols):
            top, left = r * sh, c * sw
            idx = PatchIndex(image_id=image_id, row=r, col=c, top=top, left=left)
            patch = Raster(values[top : top + wh, left : left + ww].copy(), raster.kind)
            out.append((idx, patch))
    return out


@dataclass
class PatchSet:
    """Patches from many rasters in canonical order, with grid metadata.

    Ordering is row-major within an image and ascending image id across
    images; every patch has exactly the window dimensions. Images may yield
    different patch counts, so the per-image maximum is kept as metadata and
    absent grid slots simply do not exist.
    """

    window: tuple[int, int]
    stride: tuple[int, int]
    patches: list[tuple[PatchIndex, Raster]]

    def __post_init__(self):
        previous: Optional[PatchIndex] = None
        for idx, patch in self.patches:
            if patch.values.shape != self.window:
                raise FragdiffError(
                    "bad-patchset", f"patch {idx.id} has shape {patch.values.shape}, window is {self.window}"
                )
            if previous is not None:
                if (previous.image_id, previous.row, previous.col) >= (idx.image_id, idx.row, idx.col):
                    raise FragdiffError(
                        "bad-patchset", f"patches out of order at {previous.id} -> {idx.id}"
                    )
            previous = idx

    @classmethod
    def from_rasters(
        cls,
        rasters: dict[str, Raster],
        window: tuple[int, int],
        stride: tuple[int, int],
        pad: Optional[str] = "edge",
    ) -> "PatchSet":
        patches: list[tuple[PatchIndex, Raster]] = []
        for image_id in sorted(rasters):
            patches.extend(slide_windows(rasters[image_id], window, stride, pad=pad, image_id=image_id))
        return cls(window=window, stride=stride, patches=patches)

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def image_count(self) -> int:
        return len({idx.image_id for idx, _ in self.patches})

    @property
    def max_patches_per_image(self) -> int:
        per_image: dict[str, int] = {}
        for idx, _ in self.patches:
            per_image[idx.image_id] = per_image.get(idx.image_id, 0) + 1
        return max(per_image.values(), default=0)


def stitch_counts(
    patch_counts: Sequence[tuple[PatchIndex, float]],
    window: tuple[int, int],
) -> float:
    """Sum per-patch counts over a non-overlapping tiling.

    The tiles must partition the image: any overlap is rejected, because
    summed density mass would be double-counted.
    """
    wh, ww = window
    by_image: dict[str, list[PatchIndex]] = {}
    for idx, _ in patch_counts:
        by_image.setdefault(idx.image_id, []).append(idx)
    for indices in by_image.values():
        indices.sort(key=lambda p: (p.top, p.left))
        for i, a in enumerate(indices):
            for b in indices[i + 1 :]:
                if abs(a.top - b.top) < wh and abs(a.left - b.left) < ww:
                    raise FragdiffError(
                        "overlap-not-allowed",
                        f"patches {a.id} and {b.id} overlap for window {window}",
                    )
    return float(sum(count for _, count in patch_counts))


def write_raster(path: str | Path, raster: Raster) -> None:
    """Serialize to the FGR1 container (little-endian, float32 row-major)."""
    v = np.ascontiguousarray(raster.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FGR_MAGIC)
        fh.write(struct.pack("<IIB", raster.height, raster.width, int(raster.kind)))
        fh.write(v.tobytes())


def read_raster(path: str | Path) -> Raster:
    data = Path(path).read_bytes()
    if data[:4] != FGR_MAGIC:
        raise FragdiffError("bad-raster-file", f"{path}: missing FGR1 magic")
    height, width, kind = struct.unpack_from("<IIB", data, 4)
    expected = 13 + 4 * height * width
    if len(data) != expected:
        raise FragdiffError("bad-raster-file", f"{path}: expected {expected} bytes, got {len(data)}")
    values = np.frombuffer(data, dtype="<f4", count=height * width, offset=13)
    return Raster(values.reshape(height, width).astype(np.float64), RasterKind(kind))


def iter_raster_files(directory: str | Path) -> Iterable[tuple[str, Path]]:
    """Yield (image_id, path) for every .fgr file, in ascending id order."""
    directory = Path(directory)
    for path in sorted(directory.glob("*.fgr")):
        yield path.stem, path
