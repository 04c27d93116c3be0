import logging
import math

import numpy as np
import pytest

from microdiff.data import (
    BucketSet,
    DatasetManifest,
    ManifestEntry,
    assign_bucket,
    decode_source,
    encode_inline_array,
    format_bucket_table,
    generate_buckets,
    load_manifest,
    make_batch_schedule,
    prepare_example,
    resize_bilinear,
    save_manifest,
    size_histogram,
)

# Golden multi-aspect table for (1024^2, 64, 512, 2048): 40 rows.
GOLDEN_1024_BUCKETS = (
    (512, 2048), (512, 1984), (512, 1920), (512, 1856),
    (576, 1792), (576, 1728), (576, 1664),
    (640, 1600), (640, 1536),
    (704, 1472), (704, 1408), (704, 1344),
    (768, 1344), (768, 1280),
    (832, 1216), (832, 1152),
    (896, 1152), (896, 1088),
    (960, 1088), (960, 1024),
    (1024, 1024), (1024, 960),
    (1088, 960), (1088, 896),
    (1152, 896), (1152, 832),
    (1216, 832),
    (1280, 768),
    (1344, 768),
    (1408, 704),
    (1472, 704),
    (1536, 640),
    (1600, 640),
    (1664, 576),
    (1728, 576),
    (1792, 576),
    (1856, 512), (1920, 512), (1984, 512), (2048, 512),
)


def test_golden_bucket_table():
    buckets = generate_buckets(1024 * 1024, 64, 512, 2048)
    assert buckets.buckets == GOLDEN_1024_BUCKETS
    assert len(buckets) == 40


def test_bucket_invariants():
    buckets = generate_buckets(1024 * 1024, 64, 512, 2048)
    ratios = [h / w for h, w in buckets.buckets]
    assert all(a < b for a, b in zip(ratios, ratios[1:]))
    for h, w in buckets.buckets:
        assert h % 64 == 0 and w % 64 == 0
        assert h * w <= 1024 * 1024
        assert h * w >= 0.5 * 1024 * 1024  # near-constant pixel count


def test_degenerate_single_bucket():
    buckets = generate_buckets(64 * 64, 64, 64, 64)
    assert buckets.buckets == ((64, 64),)


def test_unsatisfiable_constraints_raise():
    with pytest.raises(ValueError):
        generate_buckets(32 * 32, 64, 128, 256)


def test_step_must_divide_sides():
    with pytest.raises(ValueError):
        generate_buckets(1024 * 1024, 64, 500, 2048)


def test_assign_exact_ratio():
    buckets = generate_buckets(1024 * 1024, 64, 512, 2048)
    idx = assign_bucket(1024, 1024, buckets)
    assert buckets.buckets[idx] == (1024, 1024)
    idx = assign_bucket(768, 1280, buckets)
    assert buckets.buckets[idx] == (768, 1280)


def test_assign_matches_log_distance_oracle():
    buckets = generate_buckets(1024 * 1024, 64, 512, 2048)

    def oracle(h, w):
        dists = [abs(math.log(h / w) - math.log(bh / bw)) for bh, bw in buckets.buckets]
        return dists.index(min(dists))

    rng = np.random.default_rng(0)
    for _ in range(200):
        h = int(rng.integers(100, 4000))
        w = int(rng.integers(100, 4000))
        assert assign_bucket(h, w, buckets) == oracle(h, w)
    # ratio 1000/3900 ~ 0.2564: log-closer to 0.2581 (512, 1984) than to 0.25
    assert buckets.buckets[assign_bucket(1000, 3900, buckets)] == (512, 1984)


def test_assign_tie_breaks_low_index():
    buckets = BucketSet(buckets=((32, 64), (32, 32), (64, 32)), target_area=2048, step=32)
    # ratio 1:sqrt(2) ... use a shape whose log-ratio is equidistant to 0.5 and 1
    h, w = 100, 141  # ~1/sqrt(2): log distance to 0.5 and 1.0 nearly equal
    d_half = abs(math.log(h / w) - math.log(0.5))
    d_one = abs(math.log(h / w) - math.log(1.0))
    expected = 0 if d_half <= d_one else 1
    assert assign_bucket(h, w, buckets) == expected
    with pytest.raises(ValueError):
        assign_bucket(32, 32, BucketSet(buckets=(), target_area=1024, step=32))


def test_bucket_table_format():
    buckets = generate_buckets(1024 * 1024, 64, 512, 2048)
    table = format_bucket_table(buckets)
    lines = table.strip().splitlines()
    assert lines[0] == "height\twidth\tratio"
    assert lines[1] == "512\t2048\t0.25"
    assert lines[-1] == "2048\t512\t4.0"
    assert len(lines) == 41


def _entry(i, h, w, pixels=None, caption="cap"):
    if pixels is None:
        pixels = np.random.default_rng(i).random((h, w, 1)).astype(np.float32)
    return ManifestEntry(
        id=f"e{i}", h_original=h, w_original=w, source=encode_inline_array(pixels), caption=caption
    )


def test_manifest_roundtrip(tmp_path):
    manifest = DatasetManifest(entries=(_entry(0, 10, 20), _entry(1, 30, 15)))
    path = tmp_path / "m.tsv"
    save_manifest(manifest, path)
    loaded = load_manifest(path)
    assert len(loaded) == 2
    assert loaded.entries[0].h_original == 10
    a = decode_source(manifest.entries[1], manifest.root)
    b = decode_source(loaded.entries[1], loaded.root)
    assert np.array_equal(a, b)


def test_manifest_unique_ids():
    with pytest.raises(ValueError):
        DatasetManifest(entries=(_entry(0, 4, 4), _entry(0, 5, 5)))


def test_resize_bilinear_shapes_and_constants():
    img = np.full((10, 14, 3), 0.3, dtype=np.float32)
    out = resize_bilinear(img, 7, 21)
    assert out.shape == (7, 21, 3)
    assert np.allclose(out, 0.3, atol=1e-6)


def test_prepare_example_already_bucket_sized():
    pixels = np.random.default_rng(0).random((32, 32, 1)).astype(np.float32)
    entry = _entry(0, 32, 32, pixels)
    out, cond = prepare_example(entry, (32, 32), np.random.default_rng(1))
    assert cond.crop == (0, 0)
    assert out.shape == (1, 32, 32)
    assert np.allclose(out[0], pixels[:, :, 0], atol=1e-6)


def test_prepare_example_crop_range_and_echoed_size():
    entry = _entry(3, 512, 1024)
    lefts = set()
    rng = np.random.default_rng(2)
    for _ in range(40):
        out, cond = prepare_example(entry, (512, 512), rng)
        assert out.shape == (1, 512, 512)
        assert cond.size == (512, 1024)  # pre-rescale manifest values
        assert cond.target == (512, 512)
        assert cond.crop[0] == 0 and 0 <= cond.crop[1] <= 512
        lefts.add(cond.crop[1])
    assert len(lefts) > 10


def test_prepare_example_undecodable_skips_with_log(caplog):
    entry = ManifestEntry(id="bad", h_original=8, w_original=8, source="missing.png", caption="")
    with caplog.at_level(logging.WARNING):
        assert prepare_example(entry, (8, 8), np.random.default_rng(0)) is None
    assert any("bad" in r.message for r in caplog.records)


def _square_manifest(sizes):
    return DatasetManifest(entries=tuple(_entry(i, h, w) for i, (h, w) in enumerate(sizes)))


def test_batch_schedule_single_bucket():
    manifest = _square_manifest([(32, 32)] * 12)
    buckets = BucketSet(buckets=((32, 32),), target_area=1024, step=32)
    plan = make_batch_schedule(manifest, buckets, 4, np.random.default_rng(0))
    assert len(plan) == 3
    seen = sorted(i for _, members in plan for i in members)
    assert seen == list(range(12))  # plain shuffled batching, full coverage


def test_batch_schedule_alternates_between_equal_buckets():
    sizes = [(32, 64)] * 8 + [(64, 32)] * 8
    manifest = _square_manifest(sizes)
    buckets = BucketSet(buckets=((32, 64), (64, 32)), target_area=2048, step=32)
    plan = make_batch_schedule(manifest, buckets, 4, np.random.default_rng(1))
    ids = [b for b, _ in plan]
    assert len(ids) == 4
    assert ids[0] != ids[1] and ids[1] != ids[2] and ids[2] != ids[3]


def test_batch_schedule_wraps_remainders():
    manifest = _square_manifest([(32, 32)] * 5)
    buckets = BucketSet(buckets=((32, 32),), target_area=1024, step=32)
    plan = make_batch_schedule(manifest, buckets, 4, np.random.default_rng(2))
    assert len(plan) == 2
    assert all(len(m) == 4 for _, m in plan)
    covered = {i for _, members in plan for i in members}
    assert covered == set(range(5))


def test_size_histogram_fraction():
    sizes = [(100, 100)] * 61 + [(10, 300)] * 39
    manifest = _square_manifest(sizes)
    result = size_histogram(manifest, 64)
    assert result["fraction_below"] == pytest.approx(0.39)
    assert size_histogram(manifest, 0)["fraction_below"] == 0.0
    all_big = _square_manifest([(100, 100)] * 5)
    assert size_histogram(all_big, 64)["fraction_below"] == 0.0
    with pytest.raises(ValueError):
        size_histogram(DatasetManifest(entries=()), 64)
