"""Split large aerial rasters into a regular grid of fixed-size patches.

Input is treated as a plain raster; georeferencing metadata is ignored
(grid offsets in the manifest let a GIS layer re-attach coordinates if
needed). Desk-scale tool: inputs are capped at ~512 megapixels and
decoded fully into memory.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

MAX_RASTER_PIXELS = 512_000_000

# Lift PIL's decompression-bomb ceiling to our documented cap so large
# orthomosaics open without warnings; load_raster enforces the cap itself.
if Image.MAX_IMAGE_PIXELS is not None and Image.MAX_IMAGE_PIXELS < MAX_RASTER_PIXELS:
    Image.MAX_IMAGE_PIXELS = MAX_RASTER_PIXELS

MANIFEST_NAME = "tiles.txt"


@dataclass(frozen=True)
class TileGrid:
    """A cols x rows tiling plan over an image_w x image_h raster."""

    cols: int
    rows: int
    tile_w: int
    tile_h: int
    image_w: int
    image_h: int
    pad: bool = True
    name_template: str = "tile_{row}_{col}"

    @property
    def n_tiles(self) -> int:
        return self.cols * self.rows

    def tile_name(self, row: int, col: int) -> str:
        return self.name_template.format(row=row, col=col) + ".png"


def plan_grid(image_w: int, image_h: int, tile_w: int, tile_h: int, pad: bool = True) -> TileGrid:
    """Plan ceil(image_w/tile_w) x ceil(image_h/tile_h) tiles."""
    if min(image_w, image_h, tile_w, tile_h) <= 0:
        raise ValueError("image and tile dimensions must be positive")
    cols = -(-image_w // tile_w)
    rows = -(-image_h // tile_h)
    return TileGrid(cols=cols, rows=rows, tile_w=tile_w, tile_h=tile_h,
                    image_w=image_w, image_h=image_h, pad=pad)


def load_raster(path: Union[str, Path]) -> np.ndarray:
    """Decode a PNG/TIFF raster to a uint8 array, (H, W) or (H, W, C)."""
    with Image.open(path) as im:
        if im.width * im.height > MAX_RASTER_PIXELS:
            raise ValueError(
                f"{path}: {im.width}x{im.height} exceeds the supported "
                f"{MAX_RASTER_PIXELS} pixel cap"
            )
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return np.asarray(im)


def save_png(image: np.ndarray, path: Union[str, Path]) -> None:
    Image.fromarray(image).save(path, format="PNG")


def split(
    image: np.ndarray,
    grid: TileGrid,
    out_dir: Union[str, Path],
    min_content: float = 0.0,
    threads: int = 1,
) -> list[Path]:
    """Write one PNG per tile plus a manifest; returns the tile paths.

    Edge tiles are zero-padded to full tile size when ``grid.pad`` is
    set, otherwise truncated. Tiles whose fraction of non-zero pixels
    (within the source extent) falls below ``min_content`` are skipped.
    Tile files may be written from several threads; the manifest and
    the returned list are always in row-major order.
    """
    if image.shape[0] != grid.image_h or image.shape[1] != grid.image_w:
        raise ValueError(
            f"image is {image.shape[1]}x{image.shape[0]} but the grid plans "
            f"{grid.image_w}x{grid.image_h}"
        )
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 raster, got {image.dtype}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    for row in range(grid.rows):
        y = row * grid.tile_h
        for col in range(grid.cols):
            x = col * grid.tile_w
            chunk = image[y:y + grid.tile_h, x:x + grid.tile_w]
            if min_content > 0.0:
                nonzero = chunk.any(axis=2) if chunk.ndim == 3 else chunk
                content = np.count_nonzero(nonzero)
                if content / (chunk.shape[0] * chunk.shape[1]) < min_content:
                    continue
            if grid.pad and chunk.shape[:2] != (grid.tile_h, grid.tile_w):
                padded = np.zeros((grid.tile_h, grid.tile_w) + chunk.shape[2:], dtype=np.uint8)
                padded[:chunk.shape[0], :chunk.shape[1]] = chunk
                chunk = padded
            jobs.append((row, col, x, y, out / grid.tile_name(row, col), chunk))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda j: save_png(j[5], j[4]), jobs))
    else:
        for job in jobs:
            save_png(job[5], job[4])

    mode = "pad" if grid.pad else "truncate"
    lines = [
        f"# deadwood tiles: image_w={grid.image_w} image_h={grid.image_h} "
        f"tile_w={grid.tile_w} tile_h={grid.tile_h} cols={grid.cols} "
        f"rows={grid.rows} mode={mode}"
    ]
    for row, col, x, y, path, _ in jobs:
        lines.append(f"{path.name} {row} {col} {x} {y}")
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")

    return [job[4] for job in jobs]


def read_manifest(tiles_dir: Union[str, Path]) -> tuple[TileGrid, list[tuple[str, int, int, int, int]]]:
    """Parse a tiles manifest into (grid, [(name, row, col, x, y), ...])."""
    path = Path(tiles_dir) / MANIFEST_NAME
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# deadwood tiles:"):
        raise ValueError(f"{path}: not a tile manifest")
    fields = dict(item.split("=") for item in lines[0].split(":", 1)[1].split())
    grid = TileGrid(
        cols=int(fields["cols"]),
        rows=int(fields["rows"]),
        tile_w=int(fields["tile_w"]),
        tile_h=int(fields["tile_h"]),
        image_w=int(fields["image_w"]),
        image_h=int(fields["image_h"]),
        pad=fields["mode"] == "pad",
    )
    entries = []
    for line in lines[1:]:
        if not line.strip():
            continue
        name, row, col, x, y = line.split()
        entries.append((name, int(row), int(col), int(x), int(y)))
    return grid, entries


def reassemble(tiles_dir: Union[str, Path]) -> np.ndarray:
    """Rebuild the source raster from a split output directory.

    Exact inverse of :func:`split` over the original extent when no
    tiles were filtered; filtered tiles come back as zeros.
    """
    tiles_dir = Path(tiles_dir)
    grid, entries = read_manifest(tiles_dir)
    if not entries:
        raise ValueError(f"{tiles_dir}: manifest lists no tiles")
    first = load_raster(tiles_dir / entries[0][0])
    shape = (grid.image_h, grid.image_w) + first.shape[2:]
    image = np.zeros(shape, dtype=np.uint8)
    for name, _row, _col, x, y in entries:
        tile = load_raster(tiles_dir / name)
        h = min(tile.shape[0], grid.image_h - y)
        w = min(tile.shape[1], grid.image_w - x)
        image[y:y + h, x:x + w] = tile[:h, :w]
    return image
