import numpy as np
import pytest

from granseg.features import (
    MAGIC,
    FeatureFormatError,
    PatchFeatureMap,
    RegionSpec,
    SynthSpec,
    cosine,
    read_features,
    synth_features,
    write_features,
)


def random_map(rng, h=4, w=5, d=3, normalized=False):
    data = rng.normal(size=(h, w, d)).astype(np.float32)
    if normalized:
        data /= np.linalg.norm(data, axis=-1, keepdims=True)
    return PatchFeatureMap(data=data, normalized=normalized)


def test_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(20):
        fmap = random_map(rng, h=int(rng.integers(1, 6)), w=int(rng.integers(1, 6)))
        path = tmp_path / f"m{i}.ugf"
        write_features(fmap, path)
        back = read_features(path)
        assert back.data.tobytes() == fmap.data.tobytes()
        assert back.normalized == fmap.normalized


def test_header_size_arithmetic(tmp_path):
    fmap = random_map(np.random.default_rng(1), h=2, w=2, d=3)
    path = tmp_path / "m.ugf"
    write_features(fmap, path)
    assert path.stat().st_size == 24 + 2 * 2 * 3 * 4
    assert read_features(path).data.shape == (2, 2, 3)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ugf"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(FeatureFormatError, match="magic"):
        read_features(path)


def test_truncated_payload(tmp_path):
    fmap = random_map(np.random.default_rng(2))
    path = tmp_path / "t.ugf"
    write_features(fmap, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(FeatureFormatError, match="payload"):
        read_features(path)


def test_nonfinite_rejected(tmp_path):
    fmap = random_map(np.random.default_rng(3))
    path = tmp_path / "n.ugf"
    write_features(fmap, path)
    raw = bytearray(path.read_bytes())
    raw[24:28] = np.array([np.nan], dtype="<f4").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(FeatureFormatError, match="finite"):
        read_features(path)


def test_synth_single_region():
    spec = SynthSpec(height=6, width=6, dim=8, regions=[RegionSpec("rectangle", (1, 1, 4, 4))], seed=4)
    res = synth_features(spec)
    in_pts = [(1, 1), (2, 3), (3, 2)]
    for p in in_pts[1:]:
        assert np.array_equal(res.features.data[p], res.features.data[in_pts[0]])
    assert cosine(res.features, (1, 1), (0, 0)) < 1.0


def test_synth_deterministic():
    spec = SynthSpec(height=5, width=7, dim=6, regions=[RegionSpec("ellipse", (0, 0, 5, 5))], noise_sigma=0.1, seed=9)
    a = synth_features(spec)
    b = synth_features(spec)
    assert a.features.data.tobytes() == b.features.data.tobytes()


def test_synth_two_region_cosines():
    spec = SynthSpec(
        height=6,
        width=8,
        dim=16,
        regions=[RegionSpec("rectangle", (0, 0, 6, 4)), RegionSpec("rectangle", (0, 4, 6, 8))],
        seed=5,
    )
    res = synth_features(spec)
    # intra-region cosine is exactly 1 (identical vectors)
    assert cosine(res.features, (0, 0), (5, 3)) == 1.0
    # inter-region cosine equals the dot of the two chosen directions
    d0 = res.features.data[0, 0].astype(np.float64)
    d1 = res.features.data[0, 7].astype(np.float64)
    expected = float(d0 @ d1 / (np.linalg.norm(d0) * np.linalg.norm(d1)))
    assert cosine(res.features, (0, 0), (5, 7)) == pytest.approx(expected, abs=1e-12)
    assert abs(expected) <= np.cos(np.radians(30)) + 1e-6  # separation floor


def test_synth_intra_one_inter_below_one():
    spec = SynthSpec(
        height=6,
        width=8,
        dim=12,
        regions=[RegionSpec("rectangle", (0, 0, 6, 4)), RegionSpec("rectangle", (0, 4, 6, 8))],
        seed=6,
    )
    res = synth_features(spec)
    assert cosine(res.features, (1, 0), (4, 2)) == 1.0
    assert cosine(res.features, (1, 0), (1, 6)) < 1.0


def test_synth_rejects_non_nested_overlap():
    spec = SynthSpec(
        height=6,
        width=6,
        dim=4,
        regions=[RegionSpec("rectangle", (0, 0, 4, 4)), RegionSpec("rectangle", (2, 2, 6, 6))],
        seed=0,
    )
    with pytest.raises(ValueError, match="overlap"):
        synth_features(spec)


def test_synth_nested_requires_containment():
    spec = SynthSpec(
        height=6,
        width=6,
        dim=4,
        regions=[RegionSpec("rectangle", (0, 0, 4, 4)), RegionSpec("rectangle", (2, 2, 6, 6), parent=0)],
        seed=0,
    )
    with pytest.raises(ValueError, match="contained"):
        synth_features(spec)


def test_cosine_hand_value():
    data = np.zeros((1, 2, 2), dtype=np.float32)
    data[0, 0] = [1.0, 0.0]
    data[0, 1] = [1.0, 1.0]
    fmap = PatchFeatureMap(data=data, normalized=False)
    assert cosine(fmap, (0, 0), (0, 1)) == pytest.approx(np.sqrt(0.5), abs=1e-6)


def test_cosine_orthogonal_and_self():
    data = np.zeros((1, 2, 2), dtype=np.float32)
    data[0, 0] = [1.0, 0.0]
    data[0, 1] = [0.0, 1.0]
    fmap = PatchFeatureMap(data=data, normalized=True)
    assert cosine(fmap, (0, 0), (0, 1)) == 0.0
    assert cosine(fmap, (0, 1), (0, 1)) == 1.0


def test_cosine_out_of_range():
    fmap = PatchFeatureMap(data=np.ones((2, 2, 2), dtype=np.float32))
    with pytest.raises(IndexError):
        cosine(fmap, (0, 0), (2, 0))


def test_normalized_flag_validated():
    with pytest.raises(ValueError, match="norms"):
        PatchFeatureMap(data=np.full((2, 2, 2), 3.0, dtype=np.float32), normalized=True)


def test_read_normalize_on_load(tmp_path):
    fmap = random_map(np.random.default_rng(8))
    path = tmp_path / "r.ugf"
    write_features(fmap, path)
    back = read_features(path, normalize=True)
    assert back.normalized
    norms = np.linalg.norm(back.data, axis=-1)
    assert np.allclose(norms, 1.0, atol=1e-5)
