import json

import numpy as np
import pytest

from cylseg.volume import (
    LabelVolume,
    Pole,
    Volume,
    VolumeError,
    VolumeHeader,
    flat_index,
    load_labels,
    load_volume,
    save_volume,
    unflat_index,
    validate_pair,
)


def write_rvol(stem, dims, dtype, raw, **extra):
    stem.with_name(stem.name + ".json").write_text(
        json.dumps({"dims": list(dims), "dtype": dtype, **extra})
    )
    stem.with_name(stem.name + ".raw").write_bytes(raw)


def test_load_kidney_sized_header(tmp_path):
    # 18 slices of 256x256 i16 occupy 2,359,296 bytes
    data = np.arange(18 * 256 * 256, dtype="<i2").reshape(18, 256, 256)
    write_rvol(tmp_path / "v", [18, 256, 256], "i16", data.tobytes())
    vol = load_volume(tmp_path / "v")
    assert vol.dims == (18, 256, 256)
    assert len(data.tobytes()) == 2_359_296
    assert np.array_equal(vol.data, data)


def test_single_voxel_f32(tmp_path):
    write_rvol(tmp_path / "one", [1, 1, 1], "f32", np.zeros(1, "<f4").tobytes())
    vol = load_volume(tmp_path / "one")
    assert vol.dims == (1, 1, 1)
    assert vol.voxel(0, 0, 0) == 0.0


def test_length_mismatch_is_an_error(tmp_path):
    write_rvol(tmp_path / "bad", [2, 4, 4], "u8", bytes(100))
    with pytest.raises(VolumeError, match="100 bytes"):
        load_volume(tmp_path / "bad")


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nothing")
    (tmp_path / "half.json").write_text('{"dims":[1,1,1],"dtype":"u8"}')
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "half")


def test_suffix_is_ignored(tmp_path, rng):
    vol = Volume(rng.integers(0, 255, (2, 3, 4)).astype(np.uint8))
    save_volume(vol, tmp_path / "x.json")
    assert np.array_equal(load_volume(tmp_path / "x.raw").data, vol.data)


def test_u8_round_trip_bytes(tmp_path, rng):
    vol = Volume(rng.integers(0, 256, (4, 16, 16)).astype(np.uint8))
    save_volume(vol, tmp_path / "u")
    again = load_volume(tmp_path / "u")
    assert again.data.tobytes() == vol.data.tobytes()
    save_volume(again, tmp_path / "u2")
    assert (tmp_path / "u.raw").read_bytes() == (tmp_path / "u2.raw").read_bytes()
    assert (tmp_path / "u.json").read_text() == (tmp_path / "u2.json").read_text()


def test_f32_round_trip_values(tmp_path, rng):
    vol = Volume(rng.normal(size=(3, 5, 7)).astype(np.float32), spacing=(2.5, 0.7, 0.7))
    save_volume(vol, tmp_path / "f")
    again = load_volume(tmp_path / "f")
    assert np.array_equal(again.data, vol.data)
    assert again.spacing == (2.5, 0.7, 0.7)


def test_corrupt_dtype_in_header(tmp_path):
    save_volume(Volume(np.zeros((1, 2, 2), np.int16)), tmp_path / "c")
    doc = json.loads((tmp_path / "c.json").read_text())
    doc["dtype"] = "f64"
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(VolumeError):
        load_volume(tmp_path / "c")


def test_header_not_json(tmp_path):
    (tmp_path / "j.json").write_text("{dims")
    (tmp_path / "j.raw").write_bytes(b"")
    with pytest.raises(VolumeError, match="JSON"):
        load_volume(tmp_path / "j")


def test_raw_is_little_endian(tmp_path):
    save_volume(Volume(np.array([[[1, 256]]], dtype=np.int16)), tmp_path / "e")
    assert (tmp_path / "e.raw").read_bytes() == b"\x01\x00\x00\x01"


def test_labels_round_trip_keep_classes(tmp_path):
    lab = LabelVolume(np.array([[[0, 1], [2, 1]]], np.uint8), {0: "bg", 1: "a", 2: "b"})
    save_volume(lab, tmp_path / "l")
    again = load_labels(tmp_path / "l")
    assert isinstance(again, LabelVolume)
    assert again.class_map == {0: "bg", 1: "a", 2: "b"}
    assert again.n_classes == 3


def test_validate_pair():
    vol = Volume(np.zeros((3, 8, 8), np.int16))
    labels = np.zeros((3, 8, 8), np.uint8)
    labels[1, 2:4, 2:4] = 1
    labels[2, 5, 5] = 2
    validate_pair(vol, LabelVolume(labels, n_classes=3))
    with pytest.raises(VolumeError, match="out of range"):
        LabelVolume(np.full((3, 8, 8), 3, np.uint8), n_classes=3)
    with pytest.raises(VolumeError, match="dims mismatch"):
        validate_pair(vol, LabelVolume(np.zeros((2, 8, 8), np.uint8), n_classes=3))


def test_volume_is_read_only():
    vol = Volume(np.zeros((1, 2, 2), np.uint8))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1


def test_flat_index_inverse(rng):
    dims = (5, 7, 11)
    arr = np.arange(5 * 7 * 11).reshape(dims)
    for _ in range(50):
        m, n, s = int(rng.integers(7)), int(rng.integers(11)), int(rng.integers(5))
        k = flat_index(m, n, s, dims)
        assert arr.ravel()[k] == arr[s, m, n]
        assert unflat_index(k, dims) == (m, n, s)


def test_pole_parse_and_check():
    assert Pole.parse("3, 4,5") == Pole(3, 4, 5)
    with pytest.raises(VolumeError):
        Pole.parse("1,2")
    with pytest.raises(VolumeError):
        Pole(8, 0, 0).check((1, 8, 8))


def test_header_json_round_trip():
    hdr = VolumeHeader((2, 3, 4), "i16", {0: "a"}, (1.0, 1.0, 2.0))
    assert VolumeHeader.from_json(json.loads(json.dumps(hdr.to_json()))) == hdr
