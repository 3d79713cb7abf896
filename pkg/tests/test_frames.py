import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mifnet.exceptions import ConfigurationError, FormatError, ValidationError
from mifnet.frames import (
    BlockLayout,
    Frame,
    PartitionMaps,
    Role,
    extract_patches,
    frame_nbytes,
    patch_count,
    rasterize_partition,
    read_partition_sidecar,
    read_yuv_sequence,
    write_partition_sidecar,
    write_yuv_sequence,
)


def test_constant_8bit_file(tmp_path):
    path = tmp_path / "gray.yuv"
    path.write_bytes(bytes([128]) * frame_nbytes(16, 16, 8) * 2)
    frames = read_yuv_sequence(path, 16, 16, 8)
    assert len(frames) == 2
    assert [f.index for f in frames] == [0, 1]
    for f in frames:
        assert np.all(f.y == 128 / 255)
        assert f.u.shape == (8, 8)


def test_size_mismatch_names_both_counts(tmp_path):
    path = tmp_path / "bad.yuv"
    path.write_bytes(b"\x00" * 500)
    with pytest.raises(FormatError, match=r"500 bytes.*384 bytes"):
        read_yuv_sequence(path, 16, 16, 8)


def test_unsupported_bit_depth(tmp_path):
    path = tmp_path / "x.yuv"
    path.write_bytes(b"\x00" * 384)
    with pytest.raises(ConfigurationError):
        read_yuv_sequence(path, 16, 16, 12)


def _ramp_bytes(w, h, frames, bit_depth):
    peak = 2 ** bit_depth - 1
    n = frame_nbytes(w, h, bit_depth) // (1 if bit_depth == 8 else 2)
    samples = (np.arange(n * frames) * 7) % (peak + 1)
    dtype = np.uint8 if bit_depth == 8 else np.dtype("<u2")
    return samples.astype(dtype).tobytes()


@pytest.mark.parametrize("bit_depth", [8, 10])
def test_ramp_round_trip_bit_exact(tmp_path, bit_depth):
    src = tmp_path / "ramp.yuv"
    dst = tmp_path / "copy.yuv"
    payload = _ramp_bytes(32, 16, 3, bit_depth)
    src.write_bytes(payload)
    frames = read_yuv_sequence(src, 32, 16, bit_depth)
    write_yuv_sequence(dst, frames, bit_depth)
    assert dst.read_bytes() == payload


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.sampled_from([(2, 2), (4, 6), (8, 4)]), st.integers(0, 2 ** 32 - 1))
def test_random_8bit_round_trip(tmp_path_factory, count, dims, seed):
    w, h = dims
    payload = np.random.default_rng(seed).integers(0, 256, frame_nbytes(w, h, 8) * count).astype(np.uint8).tobytes()
    d = tmp_path_factory.mktemp("rt")
    (d / "a.yuv").write_bytes(payload)
    write_yuv_sequence(d / "b.yuv", read_yuv_sequence(d / "a.yuv", w, h, 8), 8)
    assert (d / "b.yuv").read_bytes() == payload


class TestFrame:
    def test_odd_dimensions_rejected(self):
        with pytest.raises(ValidationError):
            Frame.from_luma(np.zeros((5, 4)))

    def test_chroma_must_be_half_size(self):
        with pytest.raises(ValidationError):
            Frame(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((2, 2)))

    def test_bounded_roles_checked(self):
        with pytest.raises(ValidationError):
            Frame.from_luma(np.full((4, 4), 1.5), role=Role.URF)
        Frame.from_luma(np.full((4, 4), -3.0), role=Role.DIFFERENCE)

    def test_non_finite_rejected(self):
        y = np.zeros((4, 4))
        y[1, 1] = np.nan
        with pytest.raises(ValidationError):
            Frame.from_luma(y, role=Role.DIFFERENCE)

    def test_planes_are_read_only(self):
        f = Frame.from_luma(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            f.y[0, 0] = 1.0


def test_single_block_ring():
    maps = rasterize_partition(BlockLayout(cu=[(0, 0, 8, 8)], tu=[(0, 0, 8, 8)]), 8, 8)
    assert np.sum(maps.cu == -1) == 36
    assert np.all(maps.cu[1:-1, 1:-1] == -1)
    assert np.all(maps.cu[0] == 1) and np.all(maps.cu[:, -1] == 1)


def _brute_force_perimeter(rects, w, h):
    out = np.empty((h, w))
    for yy in range(h):
        for xx in range(w):
            on = False
            for x, y, bw, bh in rects:
                inside = x <= xx < x + bw and y <= yy < y + bh
                edge = xx in (x, x + bw - 1) or yy in (y, y + bh - 1)
                on = on or (inside and edge)
            out[yy, xx] = 1.0 if on else -1.0
    return out


def test_four_blocks_cross():
    rects = [(0, 0, 8, 8), (8, 0, 8, 8), (0, 8, 8, 8), (8, 8, 8, 8)]
    maps = rasterize_partition(BlockLayout(cu=rects, tu=rects), 16, 16)
    expected = _brute_force_perimeter(rects, 16, 16)
    np.testing.assert_array_equal(maps.cu, expected)
    lines = {0, 7, 8, 15}
    for yy in range(16):
        for xx in range(16):
            assert (maps.cu[yy, xx] == 1) == (yy in lines or xx in lines)


def test_overlap_and_gap_rejected():
    with pytest.raises(ValidationError, match="overlaps"):
        rasterize_partition(BlockLayout(cu=[(0, 0, 8, 8), (4, 0, 8, 8)], tu=[(0, 0, 8, 8)]), 16, 8)
    with pytest.raises(ValidationError, match="gap"):
        rasterize_partition(BlockLayout(cu=[(0, 0, 8, 8)], tu=[(0, 0, 8, 8)]), 16, 8)


def _random_quadtree(rng, size, min_size, x=0, y=0):
    if size > min_size and rng.random() < 0.6:
        half = size // 2
        return [r for dy in (0, half) for dx in (0, half)
                for r in _random_quadtree(rng, half, min_size, x + dx, y + dy)]
    return [(x, y, size, size)]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rasterize_matches_brute_force_on_random_layouts(seed):
    rng = np.random.default_rng(seed)
    cu = [r for oy in (0, 32) for r in _random_quadtree(rng, 32, 8, 0, oy)]
    tu = [r for oy in (0, 32) for r in _random_quadtree(rng, 32, 4, 0, oy)]
    maps = rasterize_partition(BlockLayout(cu=cu, tu=tu), 32, 64)
    assert set(np.unique(maps.cu)) <= {-1.0, 1.0}
    np.testing.assert_array_equal(maps.cu, _brute_force_perimeter(cu, 32, 64))
    np.testing.assert_array_equal(maps.tu, _brute_force_perimeter(tu, 32, 64))


def test_partition_maps_validate_values_and_ring():
    with pytest.raises(ValidationError):
        PartitionMaps(np.zeros((4, 4)), np.ones((4, 4)))
    bad = np.ones((4, 4))
    bad[0, 1] = -1
    with pytest.raises(ValidationError):
        PartitionMaps(bad, np.ones((4, 4)))


def test_sidecar_round_trip(tmp_path):
    layouts = [BlockLayout(cu=[(0, 0, 8, 8)], tu=[(0, 0, 4, 4), (4, 0, 4, 4), (0, 4, 4, 4), (4, 4, 4, 4)])] * 2
    path = tmp_path / "parts.json"
    write_partition_sidecar(path, layouts)
    obj = json.loads(path.read_text())
    assert obj[0]["cu"] == [[0, 0, 8, 8]]
    assert read_partition_sidecar(path) == layouts


def test_sidecar_bad_json(tmp_path):
    path = tmp_path / "p.json"
    path.write_text("{nope")
    with pytest.raises(FormatError):
        read_partition_sidecar(path)


def _maps(h, w):
    m = np.ones((h, w))
    return PartitionMaps(m, m)


@pytest.mark.parametrize("size,expected", [(64, 1), (128, 4), (100, 1)])
def test_patch_counts(size, expected):
    raw = np.zeros((size, size))
    assert len(extract_patches(raw, raw, _maps(size, size), stride=64)) == expected


def test_patch_count_by_enumeration():
    # count grid positions whose 64x64 window fits, by brute force
    positions = [(y, x) for y in range(0, 100, 64) for x in range(0, 100, 64) if y + 64 <= 100 and x + 64 <= 100]
    assert patch_count(100, 100, 64) == len(positions) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(64, 160), st.integers(64, 160), st.integers(8, 80))
def test_patch_count_formula(h, w, stride):
    plane = np.zeros((h, w))
    got = len(extract_patches(plane, plane, _maps(h, w), stride=stride))
    assert got == ((h - 64) // stride + 1) * ((w - 64) // stride + 1)


def test_patches_are_co_located():
    rng = np.random.default_rng(0)
    raw, urf, ref = rng.random((3, 128, 128))
    maps = _maps(128, 128)
    patches = extract_patches(raw, urf, maps, [ref], stride=64)
    p = patches[3]
    assert p.origin == (64, 64)
    np.testing.assert_array_equal(p.raw_patch, raw[64:, 64:])
    np.testing.assert_array_equal(p.ref_patches[0], ref[64:, 64:])
    assert p.num_refs == 1


def test_patch_resolution_mismatch():
    with pytest.raises(ValidationError):
        extract_patches(np.zeros((64, 64)), np.zeros((64, 72)), _maps(64, 64))
