import numpy as np
import pytest

from ccamtl import nbt, pnm
from ccamtl.augment import Sample
from ccamtl.exceptions import InputError


def test_nbt_layout_by_hand():
    buf = nbt.encode(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"NBT1"
    assert buf[4] == 2
    assert buf[5:13] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(buf[13:], "<f4").tolist() == [1.0, 2.0, 3.0]


@pytest.mark.parametrize("shape", [(), (0,), (4,), (2, 3), (2, 1, 3, 3)])
def test_nbt_round_trip(tmp_path, rng, shape):
    arr = rng.normal(size=shape).astype(np.float32)
    nbt.save(tmp_path / "a.nbt", arr)
    back = nbt.load(tmp_path / "a.nbt")
    assert back.shape == arr.shape and back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_nbt_rejects_truncation_and_bad_magic(tmp_path, rng):
    buf = nbt.encode(rng.normal(size=(3, 3)))
    for cut in (3, 6, len(buf) - 1):
        (tmp_path / "t.nbt").write_bytes(buf[:cut])
        with pytest.raises(InputError):
            nbt.load(tmp_path / "t.nbt")
    (tmp_path / "m.nbt").write_bytes(b"XBT1" + buf[4:])
    with pytest.raises(InputError):
        nbt.load(tmp_path / "m.nbt")
    (tmp_path / "x.nbt").write_bytes(buf + b"\0")
    with pytest.raises(InputError):
        nbt.load(tmp_path / "x.nbt")


def test_checkpoint_round_trip_and_index(tmp_path, rng):
    state = {"b.w": rng.normal(size=(2, 3)), "a": rng.normal(size=4), "c": np.float32(2.5)}
    nbt.save_checkpoint(tmp_path / "m.ckpt", state)
    back = nbt.load_checkpoint(tmp_path / "m.ckpt")
    assert set(back) == set(state)
    for k in state:
        np.testing.assert_allclose(back[k], np.asarray(state[k], np.float32))
    lines = (tmp_path / "m.ckpt.index").read_text().splitlines()
    assert [ln.split()[0] for ln in lines] == ["a", "b.w", "c"]
    assert lines[1].split()[3] == "2x3"


def test_pnm_header_with_comments_and_whitespace(tmp_path):
    payload = bytes(range(6))
    (tmp_path / "a.pgm").write_bytes(b"P5 # note\n# another\n3   2\n255\n" + payload)
    out = pnm.read_pnm(tmp_path / "a.pgm")
    assert out.data.shape == (2, 3)
    assert out.data.ravel().tolist() == list(range(6))
    assert out.comments == ["note", "another"]


def test_pnm_truncated(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P6\n2 2\n255\n" + b"\0" * 11)
    with pytest.raises(InputError):
        pnm.read_image(tmp_path / "a.ppm")
    (tmp_path / "b.ppm").write_bytes(b"P6\n2 ")
    with pytest.raises(InputError):
        pnm.read_image(tmp_path / "b.ppm")
    (tmp_path / "c.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(InputError):
        pnm.read_image(tmp_path / "c.ppm")


def test_depth_is_16_bit_big_endian_with_scale(tmp_path):
    (tmp_path / "d.pgm").write_bytes(b"P5\n# depth_scale=0.01\n2 1\n65535\n" + bytes([1, 0, 0, 7]))
    depth, scale = pnm.read_depth(tmp_path / "d.pgm")
    assert scale == 0.01
    np.testing.assert_allclose(depth, [[2.56, 0.07]], rtol=1e-6)


def test_depth_default_scale(tmp_path):
    (tmp_path / "d.pgm").write_bytes(b"P5\n1 1\n65535\n" + bytes([3, 232]))
    depth, scale = pnm.read_depth(tmp_path / "d.pgm")
    assert scale == pnm.DEFAULT_DEPTH_SCALE
    assert depth[0, 0] == pytest.approx(1.0)


def test_triplet_files_round_trip_bytewise(tmp_path, rng):
    img = rng.integers(0, 256, (6, 5, 3)).astype(np.float32) / 255
    depth = rng.integers(1, 60000, (6, 5)) * 0.001
    label = rng.integers(0, 5, (6, 5)).astype(np.uint8)
    pnm.write_triplet(tmp_path / "a", Sample(img, depth, label))
    sample, scale = pnm.read_triplet(tmp_path / "a")
    np.testing.assert_array_equal(sample.label, label)
    np.testing.assert_allclose(sample.image, img, atol=1e-7)
    np.testing.assert_allclose(sample.depth, depth, rtol=1e-6)
    pnm.write_triplet(tmp_path / "b", sample, scale)
    for name in (pnm.IMAGE_NAME, pnm.DEPTH_NAME, pnm.LABEL_NAME):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_find_triplets(tmp_path, rng):
    s = Sample(np.zeros((2, 2, 3)), np.ones((2, 2)), np.zeros((2, 2), np.uint8))
    for name in ("b", "a"):
        pnm.write_triplet(tmp_path / name, s)
    (tmp_path / "empty").mkdir()
    assert [p.name for p in pnm.find_triplets(tmp_path)] == ["a", "b"]
    assert pnm.find_triplets(tmp_path / "a") == [tmp_path / "a"]
    with pytest.raises(InputError):
        pnm.find_triplets(tmp_path / "empty")
