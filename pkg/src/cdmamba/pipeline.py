"""Scene tiling, tiled inference with reassembly, and error-overlay export.

Scenes live on disk as tensor containers: ``<id>.cdmt`` holds the ``[4, H, W]``
bands (R, G, B, NIR) and an optional ``<id>.mask.cdmt`` holds the ``[H, W]``
truth.  Tiles are written as ``<id>_r<row>_c<col>.cdmt`` with zero-padded
four-digit pixel offsets.

Overlay images are binary PPM (``P6``): the ASCII header
``"P6\\n<width> <height>\\n255\\n"`` followed by ``height * width`` RGB byte
triples in row-major order.
"""

from __future__ import annotations

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import container
from .losses import ConfusionCounts
from .synthetic import TileDataset, worker_count

MASK_SUFFIX = ".mask.cdmt"
TILE_NAME = re.compile(r"^(?P<scene>.+)_r(?P<row>\d{4,})_c(?P<col>\d{4,})$")

WHITE, GREEN, RED, BLACK = (255, 255, 255), (0, 255, 0), (255, 0, 0), (0, 0, 0)


@dataclass
class RasterScene:
    bands: np.ndarray                  # [4, H, W]
    truth: np.ndarray | None = None    # [H, W] in {0, 1}
    scene_id: str = "scene"

    def __post_init__(self):
        self.bands = np.asarray(self.bands)
        if self.bands.ndim != 3 or self.bands.shape[0] != 4:
            raise ValueError(f"scene bands must be [4, H, W], got {self.bands.shape}")
        if not np.all(np.isfinite(self.bands)):
            raise ValueError(f"scene {self.scene_id!r} has non-finite band values")
        if self.truth is not None:
            self.truth = np.asarray(self.truth)
            if self.truth.shape != self.bands.shape[1:]:
                raise ValueError(f"truth {self.truth.shape} does not match bands {self.bands.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bands.shape[1], self.bands.shape[2]


@dataclass
class Tile:
    scene_id: str
    row: int
    col: int
    bands: np.ndarray
    truth: np.ndarray | None = None

    @property
    def name(self) -> str:
        return tile_name(self.scene_id, self.row, self.col)


@dataclass
class TileSet:
    tiles: list[Tile]
    extent: int
    padded_shape: tuple[int, int]
    scene_shape: tuple[int, int]
    scene_id: str = "scene"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tiles)

    def images(self) -> np.ndarray:
        return np.stack([t.bands for t in self.tiles])

    def dataset(self) -> TileDataset:
        if any(t.truth is None for t in self.tiles):
            raise ValueError("tiles carry no truth masks")
        return TileDataset(self.images(), np.stack([t.truth for t in self.tiles]))


def tile_name(scene_id: str, row: int, col: int) -> str:
    return f"{scene_id}_r{row:04d}_c{col:04d}"


def tile_grid(h: int, w: int, extent: int, mode: str = "train") -> list[tuple[int, int]]:
    """Row-major ``(row, col)`` pixel offsets of the tiles covering an ``h`` x ``w`` scene."""
    if extent <= 0 or extent % 32:
        raise ValueError(f"tile extent must be a positive multiple of 32, got {extent}")
    if extent > h or extent > w:
        raise ValueError(f"tile extent {extent} exceeds scene extent {(h, w)}")
    if mode == "train":
        rows, cols = h // extent, w // extent
    elif mode == "infer":
        rows, cols = -(-h // extent), -(-w // extent)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return [(r * extent, c * extent) for r in range(rows) for c in range(cols)]


def tile_scene(scene: RasterScene, extent: int, mode: str = "train") -> TileSet:
    """Row-major disjoint ``extent`` x ``extent`` tiles.

    ``mode="train"`` drops the remainder strips; ``mode="infer"`` reflect-pads
    the scene up to the next multiple of ``extent`` so every pixel is covered.
    """
    h, w = scene.shape
    offsets = tile_grid(h, w, extent, mode)
    rows = offsets[-1][0] + extent
    cols = offsets[-1][1] + extent
    bands, truth = scene.bands, scene.truth
    if mode == "infer":
        pad = ((0, rows - h), (0, cols - w))
        bands = np.pad(bands, ((0, 0),) + pad, mode="reflect")
        if truth is not None:
            truth = np.pad(truth, pad, mode="reflect")
    tiles = []
    for r, c in offsets:
        sl = (slice(r, r + extent), slice(c, c + extent))
        tiles.append(Tile(scene.scene_id, r, c,
                          np.ascontiguousarray(bands[(slice(None),) + sl]),
                          None if truth is None else np.ascontiguousarray(truth[sl])))
    return TileSet(tiles, extent, (rows, cols), (h, w), scene.scene_id)


def reassemble(tileset: TileSet, tile_maps: np.ndarray) -> np.ndarray:
    """Place per-tile ``[T, T]`` maps on the padded canvas and crop to the scene."""
    canvas = np.zeros(tileset.padded_shape, dtype=np.asarray(tile_maps).dtype)
    e = tileset.extent
    for tile, m in zip(tileset.tiles, tile_maps):
        canvas[tile.row:tile.row + e, tile.col:tile.col + e] = m
    h, w = tileset.scene_shape
    return canvas[:h, :w]


PredictFn = Callable[[np.ndarray], np.ndarray]


def infer_scene(scene: RasterScene, predict_fn: PredictFn, extent: int,
                batch_size: int = 4, workers: int | None = None) -> np.ndarray:
    """Probability map ``[H, W]`` from tiled predictions (``predict_fn``: ``[N,4,T,T] -> [N,T,T]``)."""
    tileset = tile_scene(scene, extent, mode="infer")
    images = tileset.images()
    chunks = [images[s:s + batch_size] for s in range(0, len(images), batch_size)]
    n_workers = min(worker_count(workers), len(chunks))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            preds = list(pool.map(predict_fn, chunks))
    else:
        preds = [predict_fn(c) for c in chunks]
    return reassemble(tileset, np.concatenate(preds, axis=0))


def default_extent(h: int, w: int, preferred: int = 384) -> int:
    """``preferred`` when the scene is large enough, else the largest multiple of 32 that fits."""
    side = min(h, w)
    if side >= preferred:
        return preferred
    if side < 32:
        raise ValueError(f"scene extent {(h, w)} is smaller than one 32-pixel tile")
    return side // 32 * 32


# --------------------------------------------------------------------------
# overlays


def render_overlay(pred, truth) -> np.ndarray:
    """``[H, W, 3]`` uint8: white TP, green FP, red FN, black TN."""
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    rgb = np.zeros(p.shape + (3,), dtype=np.uint8)
    rgb[p & t] = WHITE
    rgb[p & ~t] = GREEN
    rgb[~p & t] = RED
    return rgb


def overlay_counts(rgb: np.ndarray) -> ConfusionCounts:
    """Count overlay colours back into a confusion table."""
    def count(colour):
        return int(np.count_nonzero(np.all(rgb == np.array(colour, dtype=np.uint8), axis=-1)))
    counts = ConfusionCounts(count(WHITE), count(GREEN), count(RED), count(BLACK))
    if counts.total != rgb.shape[0] * rgb.shape[1]:
        raise ValueError("overlay holds colours outside the four-colour palette")
    return counts


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs [H, W, 3] bytes, got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError(f"{path}: not a binary PPM written by write_ppm")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: payload size {data.size} != {w * h * 3}")
    return data.reshape(h, w, 3)


# --------------------------------------------------------------------------
# files


def mask_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name[: -len(".cdmt")] + MASK_SUFFIX) if p.name.endswith(".cdmt") else p.with_name(p.name + MASK_SUFFIX)


def load_scene(path) -> RasterScene:
    """Bands from ``path`` plus the sibling truth mask when one exists."""
    p = Path(path)
    bands = container.load_tensor(p)
    mp = mask_path(p)
    truth = container.load_tensor(mp) if mp.exists() else None
    scene_id = p.name[: -len(".cdmt")] if p.name.endswith(".cdmt") else p.stem
    return RasterScene(bands, truth, scene_id)


def save_scene(path, scene: RasterScene) -> None:
    container.save_tensor(path, scene.bands)
    if scene.truth is not None:
        container.save_tensor(mask_path(path), scene.truth)


def write_tiles(tileset: TileSet, out_dir) -> list[Path]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for tile in tileset.tiles:
        p = Path(out_dir) / f"{tile.name}.cdmt"
        container.save_tensor(p, tile.bands)
        if tile.truth is not None:
            container.save_tensor(mask_path(p), tile.truth)
        written.append(p)
    return written


def tile_files(data_dir) -> list[Path]:
    """Band files of a tile directory, sorted by name (masks excluded)."""
    files = sorted(p for p in Path(data_dir).glob("*.cdmt") if not p.name.endswith(MASK_SUFFIX))
    if not files:
        raise FileNotFoundError(f"no tile containers in {data_dir}")
    return files


def load_tile_dir(data_dir, names: list[str] | None = None) -> tuple[list[str], TileDataset]:
    """All (or the named) tiles of a directory with their masks."""
    files = tile_files(data_dir)
    if names is not None:
        by_name = {p.name[: -len(".cdmt")]: p for p in files}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise FileNotFoundError(f"tiles not found in {data_dir}: {missing[:3]}")
        files = [by_name[n] for n in names]
    images, masks = [], []
    for p in files:
        mp = mask_path(p)
        if not mp.exists():
            raise FileNotFoundError(f"{p.name} has no truth mask ({mp.name})")
        images.append(container.load_tensor(p))
        masks.append(container.load_tensor(mp))
    shapes = {a.shape for a in images}
    if len(shapes) != 1:
        raise ValueError(f"tiles of differing shapes in {data_dir}: {sorted(shapes)}")
    return [p.name[: -len(".cdmt")] for p in files], TileDataset(np.stack(images), np.stack(masks))


def write_dataset(data: TileDataset, out_dir, prefix: str = "tile") -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(len(data)):
        name = f"{prefix}_{i:05d}"
        container.save_tensor(Path(out_dir) / f"{name}.cdmt", data.images[i])
        container.save_tensor(Path(out_dir) / f"{name}{MASK_SUFFIX}", data.masks[i])
        names.append(name)
    return names
