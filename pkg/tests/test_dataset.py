import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from phgcn.dataset import (
    BadMagicError, Dataset, FeatureMap, NonFiniteError, PartitionSpec, ShapeError,
    SynthConfig, TruncatedError, UnsupportedVersionError, generate_synthetic,
    partition_pool, pool_parts, read_phgf, split_path, write_phgf,
)

finite32 = st.floats(-1e6, 1e6, width=32, allow_nan=False, allow_infinity=False)


def small_dataset(n=3, rows=6, cols=2, dim=4, seed=0):
    r = np.random.default_rng(seed)
    feats = r.normal(size=(n, rows, cols, dim)).astype(np.float32)
    return Dataset(feats, np.minimum(np.arange(n), 1), {"train": [0], "query": [1], "gallery": [2]})


# --- PHGF -------------------------------------------------------------------


def test_roundtrip_is_bit_exact(tmp_path):
    ds = small_dataset()
    write_phgf(ds, tmp_path / "d.phgf")
    back = read_phgf(tmp_path / "d.phgf")
    assert back.features.tobytes() == ds.features.tobytes()
    assert np.array_equal(back.labels, ds.labels)
    assert back.split == ds.split


@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.just(6), st.integers(1, 3), st.integers(1, 4)),
              elements=finite32),
       st.lists(st.integers(0, 2**32 - 1), min_size=3, max_size=3))
def test_roundtrip_property(tmp_path_factory, feats, labels):
    path = tmp_path_factory.mktemp("p") / "d.phgf"
    ds = Dataset(feats, labels[:len(feats)])
    write_phgf(ds, path)
    back = read_phgf(path)
    assert back.features.tobytes() == ds.features.tobytes()
    assert np.array_equal(back.labels, ds.labels)


def test_file_size_matches_layout(tmp_path):
    ds = small_dataset(n=1, rows=6, cols=2, dim=4)
    write_phgf(ds, tmp_path / "one.phgf")
    # header: magic + five u32 fields = 24 bytes; one record = label + 6*2*4 floats
    assert (tmp_path / "one.phgf").stat().st_size == 24 + 1 * (4 + 6 * 2 * 4 * 4) == 220


def test_header_layout_little_endian(tmp_path):
    ds = small_dataset(n=2, rows=6, cols=2, dim=4)
    write_phgf(ds, tmp_path / "d.phgf")
    raw = (tmp_path / "d.phgf").read_bytes()
    assert raw[:4] == b"PHGF"
    assert raw[4:24] == bytes([1, 0, 0, 0, 2, 0, 0, 0, 6, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0])
    assert raw[24:28] == bytes([0, 0, 0, 0])  # label of image 0
    assert np.frombuffer(raw[28:32], "<f4")[0] == ds.features[0, 0, 0, 0]


def test_writes_are_deterministic(tmp_path):
    ds = small_dataset()
    write_phgf(ds, tmp_path / "a.phgf")
    write_phgf(ds, tmp_path / "b.phgf")
    assert (tmp_path / "a.phgf").read_bytes() == (tmp_path / "b.phgf").read_bytes()


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(ShapeError):
        write_phgf(Dataset(np.zeros((0, 6, 1, 1)), []), tmp_path / "e.phgf")


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.phgf"
    p.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(BadMagicError) as info:
        read_phgf(p)
    assert info.value.offset == 0


def test_unsupported_version(tmp_path):
    write_phgf(small_dataset(), tmp_path / "d.phgf")
    raw = bytearray((tmp_path / "d.phgf").read_bytes())
    raw[4] = 2
    (tmp_path / "d.phgf").write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersionError):
        read_phgf(tmp_path / "d.phgf")


def test_truncated_payload_reports_offset(tmp_path):
    ds = Dataset(np.zeros((10, 6, 1, 2), np.float32), np.zeros(10))
    p = tmp_path / "t.phgf"
    write_phgf(ds, p)
    record = 4 * (1 + 6 * 2)
    p.write_bytes(p.read_bytes()[:24 + 9 * record])  # header says 10, payload holds 9
    with pytest.raises(TruncatedError) as info:
        read_phgf(p)
    assert info.value.offset == 24 + 9 * record
    assert "9 complete" in str(info.value)


def test_non_finite_value_rejected(tmp_path):
    ds = small_dataset()
    ds.features[1, 2, 1, 3] = np.nan
    write_phgf(ds, tmp_path / "n.phgf")
    with pytest.raises(NonFiniteError) as info:
        read_phgf(tmp_path / "n.phgf")
    record = 4 * (1 + 6 * 2 * 4)
    assert info.value.offset == 24 + record + 4 + 4 * ((2 * 2 + 1) * 4 + 3)


def test_missing_split_means_all_gallery(tmp_path):
    ds = small_dataset()
    write_phgf(ds, tmp_path / "d.phgf")
    split_path(tmp_path / "d.phgf").unlink()
    back = read_phgf(tmp_path / "d.phgf")
    assert back.split["gallery"] == [0, 1, 2] and back.split["query"] == []


def test_split_file_schema(tmp_path):
    write_phgf(small_dataset(), tmp_path / "d.phgf")
    split = json.loads(split_path(tmp_path / "d.phgf").read_text())
    assert split == {"train": [0], "query": [1], "gallery": [2]}


def test_query_identity_must_exist_in_gallery(tmp_path):
    ds = small_dataset()
    ds.split = {"train": [], "query": [0], "gallery": [1]}  # labels 0 vs 1
    write_phgf(ds, tmp_path / "d.phgf")
    with pytest.raises(ValueError, match="no gallery image"):
        read_phgf(tmp_path / "d.phgf")


# --- synthetic generator ----------------------------------------------------


def test_generator_counts_and_pooling():
    ds = generate_synthetic(SynthConfig(n_identities=4, images_per_identity=8, rows=24, cols=8, dim=32))
    assert len(ds) == 32
    parts = partition_pool(ds[0], PartitionSpec())
    assert parts.vectors.shape == (10, 32)


def test_generator_is_deterministic():
    cfg = SynthConfig(n_identities=3, images_per_identity=4, corrupt_prob=0.4, seed=99)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.split == b.split
    c = generate_synthetic(SynthConfig(n_identities=3, images_per_identity=4, corrupt_prob=0.4, seed=100))
    assert a.features.tobytes() != c.features.tobytes()


def test_no_corruption_variance_matches_noise():
    cfg = SynthConfig(n_identities=2, images_per_identity=200, rows=6, cols=2, dim=8,
                      noise_sigma=0.3, corrupt_prob=0.0)
    ds = generate_synthetic(cfg)
    assert not ds.meta["corrupted_stripes"].any()
    first_id = ds.features[:200].astype(np.float64)
    var = first_id.var(axis=0).mean()
    assert abs(var - 0.09) < 0.01
    # columns are replicated
    assert np.array_equal(ds.features[:, :, 0], ds.features[:, :, 1])


def test_full_corruption_replaces_every_stripe():
    ds = generate_synthetic(SynthConfig(n_identities=2, images_per_identity=3, rows=6, cols=4, dim=4,
                                        noise_sigma=0.0, corrupt_prob=1.0))
    assert ds.meta["corrupted_stripes"].all()
    # pure noise is not replicated across columns
    assert not np.array_equal(ds.features[:, :, 0], ds.features[:, :, 1])


def test_generator_split():
    ds = generate_synthetic(SynthConfig(n_identities=4, images_per_identity=3, train_identities=2))
    assert ds.split["train"] == [0, 1, 2, 3, 4, 5]
    assert ds.split["query"] == [6, 9]
    assert ds.split["gallery"] == [7, 8, 10, 11]
    ds.validate_split()


@pytest.mark.parametrize("kw", [dict(n_identities=1), dict(rows=8), dict(corrupt_prob=1.5),
                                dict(noise_sigma=-1.0), dict(train_identities=5, n_identities=4)])
def test_generator_config_errors(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


# --- pooling ----------------------------------------------------------------


def test_constant_map_pools_to_constant():
    fmap = FeatureMap(np.full((24, 8, 5), 2.5, np.float32), 0)
    parts = partition_pool(fmap)
    assert np.all(parts.vectors == 2.5)


def test_stripe_pooling_against_brute_force(rng):
    values = rng.normal(size=(24, 8, 3))
    parts = partition_pool(FeatureMap(values, 0)).vectors
    for level_offset, n in ((0, 1), (1, 3), (4, 6)):
        h = 24 // n
        for i in range(n):
            cells = [values[r, c] for r in range(i * h, (i + 1) * h) for c in range(8)]
            np.testing.assert_allclose(parts[level_offset + i], np.mean(cells, axis=0), rtol=1e-12)
    # level-6 stripe 2 covers rows 8..11
    np.testing.assert_allclose(parts[4 + 2], values[8:12].mean(axis=(0, 1)), rtol=1e-12)


def test_canonical_node_order():
    assert partition_pool(FeatureMap(np.zeros((6, 1, 1)), 0)).nodes == (
        (0, 0), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2), (2, 3), (2, 4), (2, 5))


@given(arrays(np.float64, (12, 2, 3), elements=st.floats(-100, 100)),
       arrays(np.float64, (12, 2, 3), elements=st.floats(-100, 100)),
       st.floats(-10, 10))
def test_pooling_is_linear(m1, m2, alpha):
    spec = PartitionSpec()
    lhs = pool_parts(alpha * m1 + m2, spec)
    rhs = alpha * pool_parts(m1, spec) + pool_parts(m2, spec)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@given(arrays(np.float64, (24, 4, 3), elements=st.floats(-100, 100)))
def test_global_part_is_mean_of_finest_parts(values):
    parts = pool_parts(values, PartitionSpec())
    np.testing.assert_allclose(parts[0], parts[4:].mean(axis=0), atol=1e-9)


def test_partition_divisibility_error():
    with pytest.raises(ValueError, match="not divisible"):
        partition_pool(FeatureMap(np.zeros((8, 2, 2)), 0))


@pytest.mark.parametrize("levels", [(3, 1, 6), (1, 1), (0, 3), ()])
def test_invalid_partition_specs(levels):
    with pytest.raises(ValueError):
        PartitionSpec(levels)
