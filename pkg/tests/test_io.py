import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from frdiff.io import (
    load_checkpoint,
    load_tensor,
    read_csv,
    read_pnm,
    save_checkpoint,
    save_tensor,
    to_pixels,
    write_csv,
    write_pgm,
    write_ppm,
)
from frdiff.network import build_toy_network, network_from_checkpoint


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_dump_roundtrip(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("dump") / "blocks.1.w"
    save_tensor(path, a)
    np.testing.assert_array_equal(load_tensor(path, np.float32), a)


def test_dump_layout(tmp_path):
    save_tensor(tmp_path / "x", np.array([[1.0, 2.0, 3.0]]), name="x")
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw == np.array([1, 2, 3], dtype="<f4").tobytes()
    assert json.loads((tmp_path / "x.json").read_text()) == {"name": "x", "shape": [1, 3], "dtype": "float32"}


def test_dump_size_mismatch(tmp_path):
    save_tensor(tmp_path / "x", np.zeros(4))
    (tmp_path / "x.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "x")


def test_checkpoint_roundtrip(tmp_path):
    net = build_toy_network("toy_unet", 8, 2, seed=1)
    save_checkpoint(tmp_path / "ck", net.param_arrays(), net.config)
    params, cfg = load_checkpoint(tmp_path / "ck")
    loaded = network_from_checkpoint(params, cfg)
    x = np.random.default_rng(0).standard_normal((1, 1, 8, 8))
    a = net(x, np.array([10]), np.array([0])).data
    b = loaded(x, np.array([10]), np.array([0])).data
    np.testing.assert_allclose(a, b, atol=1e-5)  # float32 storage
    with pytest.raises(ValueError):
        network_from_checkpoint({}, cfg)


def test_csv_header_and_float_format(tmp_path):
    path = write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 0.1], [2, np.float64(1e-20)]])
    assert path.read_text().splitlines() == ["a,b", "1,0.1", "2,1e-20"]
    assert read_csv(path)[1] == {"a": "2", "b": "1e-20"}


def test_pixels_and_images(tmp_path):
    np.testing.assert_array_equal(to_pixels(np.array([-2.0, -1.0, 0.0, 1.0, 3.0])), [0, 0, 128, 255, 255])
    img = np.linspace(-1, 1, 12).reshape(3, 4)
    p = write_pgm(tmp_path / "a.pgm", img)
    assert p.read_bytes().startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(read_pnm(p), to_pixels(img))
    rgb = np.zeros((3, 2, 2))
    np.testing.assert_array_equal(read_pnm(write_ppm(tmp_path / "b.ppm", rgb)), np.full((2, 2, 3), 128))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "c.pgm", np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "d.ppm", np.zeros((2, 2)))
