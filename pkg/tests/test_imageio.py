import numpy as np
import pytest
from PIL import Image

from selfensemble.imageio import load_gray, save_gray, to_uint8


def test_8bit_round_trip_is_lossless(tmp_path):
    pixels = np.arange(256, dtype=np.uint8).reshape(16, 16)
    Image.fromarray(pixels, mode="L").save(tmp_path / "a.png")
    img = load_gray(tmp_path / "a.png")
    assert img.dtype == np.float32 and img.min() == 0.0 and img.max() == 1.0
    save_gray(tmp_path / "b.png", img)
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "b.png")), pixels)


def test_16bit_is_scaled(tmp_path):
    pixels = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
    Image.fromarray(pixels).save(tmp_path / "a.png")
    img = load_gray(tmp_path / "a.png")
    np.testing.assert_allclose(img, pixels / 65535.0, atol=1e-7)


def test_rgb_uses_rec601_luma(tmp_path):
    rgb = np.zeros((1, 3, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[0, 1] = (0, 255, 0)
    rgb[0, 2] = (0, 0, 255)
    Image.fromarray(rgb, mode="RGB").save(tmp_path / "c.png")
    np.testing.assert_allclose(load_gray(tmp_path / "c.png")[0], [0.299, 0.587, 0.114], atol=1e-6)


def test_to_uint8_clips_and_rounds():
    np.testing.assert_array_equal(to_uint8(np.array([-0.5, 0.5, 1.7, 0.002])), [0, 128, 255, 1])


def test_unreadable_file_raises(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    with pytest.raises(OSError):
        load_gray(tmp_path / "x.png")
