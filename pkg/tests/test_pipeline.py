import numpy as np
import pytest

from cdmamba.losses import confusion
from cdmamba.pipeline import (BLACK, GREEN, RED, WHITE, RasterScene, default_extent, infer_scene,
                              load_scene, load_tile_dir, mask_path, overlay_counts, read_ppm, reassemble,
                              render_overlay, save_scene, tile_grid, tile_name, tile_scene, write_dataset,
                              write_ppm, write_tiles)
from cdmamba.synthetic import gen_synthetic, render_scene


def scene(h, w, seed=0, truth=True):
    rng = np.random.default_rng(seed)
    bands = rng.uniform(0, 1, (4, h, w))
    return RasterScene(bands, rng.integers(0, 2, (h, w)).astype(float) if truth else None, "s")


def pixelwise(images):
    """A position-free predictor: any misplaced tile shows up as a mismatch."""
    return 1.0 / (1.0 + np.exp(-(images[:, 0] - images[:, 3]) * 4.0))


# ---------------------------------------------------------------- tiling

@pytest.mark.parametrize("h, w, mode, count", [
    (768, 768, "train", 4), (800, 800, "train", 4), (8000, 8000, "train", 400),
    (800, 800, "infer", 9), (768, 768, "infer", 4), (8000, 8000, "infer", 441),
])
def test_tile_counts(h, w, mode, count):
    offsets = tile_grid(h, w, 384, mode)
    assert len(offsets) == count
    assert all(r % 384 == 0 and c % 384 == 0 for r, c in offsets)
    assert offsets == sorted(offsets)


def test_tile_scene_offsets_and_content():
    s = scene(800, 800)
    tiles = tile_scene(s, 384)
    assert [(t.row, t.col) for t in tiles.tiles] == [(0, 0), (0, 384), (384, 0), (384, 384)]
    t = tiles.tiles[3]
    np.testing.assert_array_equal(t.bands, s.bands[:, 384:768, 384:768])
    np.testing.assert_array_equal(t.truth, s.truth[384:768, 384:768])
    assert t.name == "s_r0384_c0384"


def test_tiles_are_disjoint_and_cover_in_train_mode():
    tiles = tile_scene(scene(96, 160), 32)
    cover = np.zeros((96, 160), int)
    for t in tiles.tiles:
        cover[t.row:t.row + 32, t.col:t.col + 32] += 1
    assert cover.max() == 1 and cover.sum() == 96 * 160


def test_tiling_errors():
    with pytest.raises(ValueError):
        tile_grid(800, 800, 100)
    with pytest.raises(ValueError):
        tile_grid(300, 800, 384)
    with pytest.raises(ValueError):
        tile_grid(800, 800, 384, mode="eval")
    with pytest.raises(ValueError):
        RasterScene(np.full((4, 8, 8), np.nan))
    with pytest.raises(ValueError):
        RasterScene(np.zeros((3, 8, 8)))


def test_tile_name_contract():
    assert tile_name("scene", 0, 384) == "scene_r0000_c0384"


def test_default_extent():
    assert default_extent(800, 800) == 384
    assert default_extent(200, 500) == 192
    with pytest.raises(ValueError):
        default_extent(16, 100)


# ---------------------------------------------------------------- reassembly

@pytest.mark.parametrize("h, w, extent", [(800, 800, 384), (100, 70, 64), (64, 64, 32)])
def test_reassembly_is_pixel_aligned(h, w, extent):
    s = scene(h, w, seed=h)
    prob = infer_scene(s, pixelwise, extent, batch_size=3)
    assert prob.shape == (h, w)
    np.testing.assert_array_equal(prob, pixelwise(s.bands[None])[0])


def test_threaded_inference_matches_serial(monkeypatch):
    s = scene(200, 200, seed=1)
    serial = infer_scene(s, pixelwise, 64, batch_size=2, workers=1)
    monkeypatch.setenv("CDMAMBA_THREADS", "4")
    np.testing.assert_array_equal(infer_scene(s, pixelwise, 64, batch_size=2), serial)


def test_reassemble_crops_padding():
    s = scene(70, 70)
    tiles = tile_scene(s, 64, mode="infer")
    assert tiles.padded_shape == (128, 128)
    out = reassemble(tiles, np.stack([np.full((64, 64), i) for i in range(4)]))
    assert out.shape == (70, 70) and out[69, 69] == 3 and out[0, 0] == 0


# ---------------------------------------------------------------- overlays

def test_overlay_examples():
    t = np.array([[1, 0], [0, 1]])
    rgb = render_overlay(t, t)
    assert {tuple(v) for v in rgb.reshape(-1, 3)} <= {WHITE, BLACK}
    assert np.all(render_overlay(np.ones((3, 3)), np.zeros((3, 3))) == np.array(GREEN, np.uint8))
    mixed = render_overlay(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [1, 0]]))
    assert [tuple(v) for v in mixed.reshape(-1, 3)] == [WHITE, GREEN, RED, BLACK]
    with pytest.raises(ValueError):
        render_overlay(np.ones(3), np.ones(4))


def test_overlay_counts_equal_confusion():
    rng = np.random.default_rng(4)
    y, t = rng.uniform(0, 1, (50, 60)), rng.integers(0, 2, (50, 60))
    pred = (y > 0.5).astype(float)
    assert overlay_counts(render_overlay(pred, t)) == confusion(y, t)


def test_ppm_round_trip_and_layout(tmp_path):
    rgb = render_overlay(np.array([[1, 1, 0]]), np.array([[1, 0, 1]]))
    write_ppm(tmp_path / "o.ppm", rgb)
    raw = (tmp_path / "o.ppm").read_bytes()
    assert raw == b"P6\n3 1\n255\n" + bytes(WHITE + GREEN + RED)
    np.testing.assert_array_equal(read_ppm(tmp_path / "o.ppm"), rgb)


# ---------------------------------------------------------------- files

def test_scene_and_tile_files(tmp_path):
    img, mask = render_scene(np.random.default_rng(0), 96, 64)
    s = RasterScene(img, mask, "demo")
    save_scene(tmp_path / "demo.cdmt", s)
    assert mask_path(tmp_path / "demo.cdmt").name == "demo.mask.cdmt"
    back = load_scene(tmp_path / "demo.cdmt")
    assert back.scene_id == "demo" and np.array_equal(back.truth, mask)
    paths = write_tiles(tile_scene(back, 32), tmp_path / "tiles")
    assert [p.name for p in paths][:2] == ["demo_r0000_c0000.cdmt", "demo_r0000_c0032.cdmt"]
    names, data = load_tile_dir(tmp_path / "tiles")
    assert len(names) == 6 and data.images.shape == (6, 4, 32, 32)
    _, subset = load_tile_dir(tmp_path / "tiles", ["demo_r0064_c0032"])
    np.testing.assert_array_equal(subset.images[0], img[:, 64:96, 32:64])


def test_dataset_directory_round_trip(tmp_path):
    data = gen_synthetic(1, 3, 32)
    names = write_dataset(data, tmp_path)
    loaded_names, loaded = load_tile_dir(tmp_path)
    assert loaded_names == names == ["tile_00000", "tile_00001", "tile_00002"]
    assert loaded.images.tobytes() == data.images.tobytes()
    with pytest.raises(FileNotFoundError):
        load_tile_dir(tmp_path, ["nope"])
    with pytest.raises(FileNotFoundError):
        load_tile_dir(tmp_path / "empty")
