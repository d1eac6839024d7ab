"""Loading, splitting, augmentation, transforms, synthetic data, manifests."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fscnet import data as D
from fscnet.seeding import rng_for


def _write_png(path, value=128, size=8, mode="RGB"):
    arr = np.full((size, size, 3) if mode == "RGB" else (size, size), value, dtype=np.uint8)
    Image.fromarray(arr, mode=mode).save(path)


# ---- loading ---------------------------------------------------------------------


def test_load_flat_directory_by_prefix(tmp_path):
    _write_png(tmp_path / "y1.png")
    _write_png(tmp_path / "no1.png")
    records, skipped = D.load_directory(tmp_path)
    assert [r.label for r in records] == [0, 1]  # lexicographic: no1 < y1
    assert {r.id for r in records} == {"y1.png", "no1.png"}
    assert skipped == []


def test_load_unprefixed_file_goes_to_skip_report(tmp_path):
    _write_png(tmp_path / "scan.png")
    _write_png(tmp_path / "y1.png")
    records, skipped = D.load_directory(tmp_path)
    assert [r.id for r in records] == ["y1.png"]
    assert skipped == [("scan.png", "unlabeled")]


def test_load_undecodable_file_reported(tmp_path):
    (tmp_path / "y_bad.png").write_bytes(b"this is not a png")
    _write_png(tmp_path / "no1.png")
    records, skipped = D.load_directory(tmp_path)
    assert [r.id for r in records] == ["no1.png"]
    assert len(skipped) == 1 and skipped[0][0] == "y_bad.png"
    assert "undecodable" in skipped[0][1]


def test_load_folder_layout(tmp_path):
    (tmp_path / "yes").mkdir()
    (tmp_path / "no").mkdir()
    _write_png(tmp_path / "yes" / "img1.png")
    _write_png(tmp_path / "no" / "img1.png")
    records, _ = D.load_directory(tmp_path)
    by_id = {r.id: r.label for r in records}
    assert by_id == {"yes/img1.png": 1, "no/img1.png": 0}


def test_load_grayscale_replicates_channels(tmp_path):
    _write_png(tmp_path / "y1.png", value=200, mode="L")
    records, _ = D.load_directory(tmp_path)
    px = records[0].pixels
    assert px.shape == (3, 8, 8)
    assert np.array_equal(px[0], px[1]) and np.array_equal(px[1], px[2])
    assert np.all((px >= 0) & (px <= 1))
    assert px[0, 0, 0] == pytest.approx(200 / 255)


def test_load_class_counts(tmp_path):
    for i in range(5):
        _write_png(tmp_path / f"y{i}.png")
        _write_png(tmp_path / f"no{i}.png")
    records, _ = D.load_directory(tmp_path)
    labels = [r.label for r in records]
    assert labels.count(1) == 5 and labels.count(0) == 5


# ---- splitting --------------------------------------------------------------------


def _fake_records(n_pos, n_neg, source=""):
    recs = []
    px = np.zeros((3, 2, 2), dtype=np.float32)
    for i in range(n_pos):
        recs.append(D.ImageRecord(id=f"{source}y{i:03d}", pixels=px, label=1, source=source))
    for i in range(n_neg):
        recs.append(D.ImageRecord(id=f"{source}no{i:03d}", pixels=px, label=0, source=source))
    return recs


def test_split_exact_proportions():
    manifest = D.stratified_split(_fake_records(50, 50), (0.7, 0.15, 0.15), seed=1)
    train_labels = [1 if rid.startswith("y") else 0 for rid in manifest.train]
    assert len(manifest.train) == 70
    assert train_labels.count(1) == 35 and train_labels.count(0) == 35
    # 50 * 0.15 = 7.5 per class: val/test land within one sample of proportional
    assert len(manifest.val) + len(manifest.test) == 30
    assert abs(len(manifest.val) - 15) <= 2 and abs(len(manifest.test) - 15) <= 2


def test_split_deterministic():
    recs = _fake_records(30, 30)
    a = D.stratified_split(recs, (0.7, 0.15, 0.15), seed=9)
    b = D.stratified_split(recs, (0.7, 0.15, 0.15), seed=9)
    assert a == b
    c = D.stratified_split(recs, (0.7, 0.15, 0.15), seed=10)
    assert a != c


def test_split_two_sources_450_450():
    # two equal sources of 1500+1500 at 70/15/15 put exactly 450 of each
    # source into the test split (225 per class per source)
    recs = _fake_records(1500, 1500, source="I") + _fake_records(1500, 1500, source="II")
    manifest = D.stratified_split(recs, (0.7, 0.15, 0.15), seed=3)
    assert manifest.per_source_counts["I"]["test"] == 450
    assert manifest.per_source_counts["II"]["test"] == 450
    test_by_source = {"I": 0, "II": 0}
    for rid in manifest.test:
        test_by_source["II" if rid.startswith("II") else "I"] += 1
    assert test_by_source == {"I": 450, "II": 450}


def test_split_requires_both_classes():
    with pytest.raises(D.DataError):
        D.stratified_split(_fake_records(5, 0), (0.7, 0.15, 0.15), seed=1)


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        D.stratified_split(_fake_records(5, 5), (0.7, 0.2, 0.2), seed=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(2, 60), st.integers(0, 2 ** 31 - 1))
def test_split_disjoint_and_covering(n_pos, n_neg, seed):
    recs = _fake_records(n_pos, n_neg)
    m = D.stratified_split(recs, (0.7, 0.15, 0.15), seed=seed)
    train, val, test = set(m.train), set(m.val), set(m.test)
    assert not (train & val) and not (train & test) and not (val & test)
    assert train | val | test == {r.id for r in recs}


def test_manifest_round_trip_bit_exact(tmp_path):
    manifest = D.stratified_split(_fake_records(20, 20, source="I"), (0.7, 0.15, 0.15), seed=5)
    p1 = tmp_path / "m1.tsv"
    p2 = tmp_path / "m2.tsv"
    D.save_manifest(manifest, p1)
    loaded = D.load_manifest(p1)
    assert loaded == manifest
    D.save_manifest(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


# ---- transforms ------------------------------------------------------------------


def _record_from_array(arr):
    return D.ImageRecord(id="r", pixels=arr.astype(np.float32), label=0, source="")


def test_resize_shapes_and_identity():
    rng = np.random.default_rng(0)
    img = rng.random((3, 10, 14)).astype(np.float32)
    out = D.resize_bilinear(img, 7, 7)
    assert out.shape == (3, 7, 7)
    assert np.array_equal(D.resize_bilinear(img, 10, 14), img)


def test_resize_constant_preserved():
    img = np.full((3, 9, 9), 0.42, dtype=np.float32)
    out = D.resize_bilinear(img, 31, 17)
    assert np.allclose(out, 0.42, atol=1e-6)


def test_rotation_zero_matches_resize_only_path():
    rng = np.random.default_rng(1)
    img = rng.random((3, 12, 12)).astype(np.float32)
    assert np.max(np.abs(D.rotate_bilinear(img, 0.0) - img)) < 1e-6


def test_rotation_ninety_degrees_is_a_permutation():
    img = np.zeros((1, 5, 5), dtype=np.float32)
    img[0, 1, 0] = 1.0
    out = D.rotate_bilinear(img, 90.0)
    # bright pixel moves as a rigid rotation about the center; mass preserved
    assert out.sum() == pytest.approx(1.0, abs=1e-5)
    assert out[0].max() == pytest.approx(1.0, abs=1e-5)


def test_rotation_fills_corners_with_zero():
    img = np.ones((1, 11, 11), dtype=np.float32)
    out = D.rotate_bilinear(img, 45.0)
    assert out[0, 0, 0] == 0.0


def test_identity_augment_pipeline_equals_resize_normalize():
    cfg = D.AugmentConfig(hflip_prob=0.0, vflip_prob=0.0, max_rotation_deg=0.0,
                          brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0,
                          target_size=9)
    rng = np.random.default_rng(2)
    rec = _record_from_array(np.random.default_rng(3).random((3, 12, 12)))
    out = D.augment(rec, cfg, rng)
    expected = D.normalize(D.resize_bilinear(rec.pixels, 9, 9), cfg.mean, cfg.std)
    assert np.array_equal(out, expected)


def test_hflip_is_involution():
    rng = np.random.default_rng(4)
    img = rng.random((3, 6, 6)).astype(np.float32)
    assert np.array_equal(img[:, :, ::-1][:, :, ::-1], img)


def test_augment_output_contract():
    cfg = D.AugmentConfig(target_size=16)
    rec = _record_from_array(np.random.default_rng(5).random((3, 20, 24)))
    out = D.augment(rec, cfg, rng_for(0, "aug"))
    assert out.shape == (3, 16, 16)
    assert np.all(np.isfinite(out))


def test_augment_deterministic_per_stream():
    cfg = D.AugmentConfig(target_size=16)
    rec = _record_from_array(np.random.default_rng(6).random((3, 20, 20)))
    a = D.augment(rec, cfg, rng_for(1, "aug"))
    b = D.augment(rec, cfg, rng_for(1, "aug"))
    assert np.array_equal(a, b)


def test_normalization_is_invertible():
    cfg = D.AugmentConfig(target_size=8)
    img = np.random.default_rng(7).random((3, 8, 8)).astype(np.float32)
    normed = D.normalize(img, cfg.mean, cfg.std)
    back = normed * np.asarray(cfg.std, dtype=np.float32).reshape(3, 1, 1) \
        + np.asarray(cfg.mean, dtype=np.float32).reshape(3, 1, 1)
    assert np.max(np.abs(back - img)) < 1e-6


def test_eval_transform_deterministic_and_shaped():
    cfg = D.AugmentConfig(target_size=62)
    rec = _record_from_array(np.random.default_rng(8).random((3, 100, 90)))
    a = D.eval_transform(rec, cfg)
    b = D.eval_transform(rec, cfg)
    assert a.shape == (3, 62, 62)
    assert np.array_equal(a, b)


def test_eval_transform_normalization_arithmetic():
    cfg = D.AugmentConfig(target_size=4, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
    rec = _record_from_array(np.full((3, 4, 4), 0.5))
    assert np.allclose(D.eval_transform(rec, cfg), 0.0, atol=1e-7)


def test_color_jitter_stays_in_range():
    cfg = D.AugmentConfig(target_size=10)
    rec = _record_from_array(np.random.default_rng(9).random((3, 10, 10)))
    for i in range(5):
        out = D.augment_pixels(rec, cfg, rng_for(2, "jitter", i))
        assert np.all((out >= 0.0) & (out <= 1.0))


def test_hsv_round_trip():
    rng = np.random.default_rng(10)
    img = rng.random((3, 6, 6)).astype(np.float64)
    back = D.hsv_to_rgb(D.rgb_to_hsv(img))
    assert np.max(np.abs(back - img)) < 1e-9


# ---- synthetic data ------------------------------------------------------------------


def test_synth_counts_and_shapes():
    records = D.synth_generate(10, 62, seed=0)
    assert len(records) == 20
    assert sum(r.label for r in records) == 10
    assert all(r.pixels.shape == (3, 62, 62) for r in records)
    assert all(r.source == "synthetic" for r in records)
    assert all((r.pixels >= 0).all() and (r.pixels <= 1).all() for r in records)


def test_synth_deterministic():
    a = D.synth_generate(5, 32, seed=7)
    b = D.synth_generate(5, 32, seed=7)
    for ra, rb in zip(a, b):
        assert ra.id == rb.id and np.array_equal(ra.pixels, rb.pixels)


def test_synth_class_means_separate():
    records = D.synth_generate(1000, 24, seed=11)
    mean0 = np.mean([r.pixels.mean() for r in records if r.label == 0])
    mean1 = np.mean([r.pixels.mean() for r in records if r.label == 1])
    assert mean1 > mean0


def test_synth_round_trip_through_loader(tmp_path):
    records = D.synth_generate(4, 16, seed=3)
    D.save_records_as_pngs(records, tmp_path)
    loaded, skipped = D.load_directory(tmp_path)
    assert skipped == []
    assert len(loaded) == 8
    labels = [r.label for r in loaded]
    assert labels.count(0) == 4 and labels.count(1) == 4


def test_synth_files_byte_identical_per_seed(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    D.save_records_as_pngs(D.synth_generate(3, 16, seed=5), d1)
    D.save_records_as_pngs(D.synth_generate(3, 16, seed=5), d2)
    for p1 in sorted(d1.iterdir()):
        p2 = d2 / p1.name
        assert p1.read_bytes() == p2.read_bytes()
