import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saunet.data import (
    AUG_METHODS,
    AugmentConfig,
    DatasetManifest,
    FundusSample,
    ManifestEntry,
    ManifestError,
    augment,
    build_augmented_set,
    crop_back,
    generate_synthetic_dataset,
    load_manifest,
    load_mask,
    load_sample,
    pad_array,
    pad_offsets,
    pad_to_target,
    parse_lineage,
    save_image,
    save_manifest,
    save_mask,
    split_validation,
    write_overlay,
)
from saunet.data import _rotate_planes


def make_sample(h=24, w=24, seed=0, sid="s0"):
    rng = np.random.default_rng(seed)
    image = rng.random((3, h, w)).astype(np.float32)
    mask = (rng.random((1, h, w)) > 0.8).astype(np.float32)
    return FundusSample(image=image, mask=mask, id=sid)


# ---------------------------------------------------------------------------
# pad / crop
# ---------------------------------------------------------------------------


def test_drive_pad_geometry():
    off = pad_offsets((584, 565), (592, 592))
    assert (off.top, off.bottom, off.left, off.right) == (4, 4, 13, 14)


def test_chase_pad_geometry():
    off = pad_offsets((999, 960), (1008, 1008))
    assert (off.top, off.bottom, off.left, off.right) == (4, 5, 24, 24)


def test_pad_equal_target_is_identity():
    off = pad_offsets((64, 64), (64, 64))
    assert (off.top, off.bottom, off.left, off.right) == (0, 0, 0, 0)
    arr = np.random.default_rng(0).random((3, 64, 64))
    assert np.array_equal(pad_array(arr, off), arr)


def test_pad_rejects_smaller_target():
    with pytest.raises(ValueError, match="smaller"):
        pad_offsets((100, 100), (64, 128))


def test_pad_crop_round_trip_is_bitwise():
    rng = np.random.default_rng(1)
    arr = rng.random((3, 584, 565)).astype(np.float32)
    off = pad_offsets((584, 565), (592, 592))
    assert np.array_equal(crop_back(pad_array(arr, off), off), arr)


def test_crop_back_validates_offsets():
    from saunet.data import PadOffsets

    with pytest.raises(ValueError, match="inconsistent"):
        crop_back(np.zeros((1, 4, 4)), PadOffsets(2, 2, 0, 0))


@settings(max_examples=25, deadline=None)
@given(h=st.integers(5, 40), w=st.integers(5, 40), dh=st.integers(0, 9), dw=st.integers(0, 9))
def test_pad_crop_round_trip_property(h, w, dh, dw):
    arr = np.random.default_rng(h * w).random((2, h, w))
    off = pad_offsets((h, w), (h + dh, w + dw))
    padded = pad_array(arr, off)
    assert padded.shape == (2, h + dh, w + dw)
    assert np.array_equal(crop_back(padded, off), arr)


def test_pad_to_target_pads_all_planes_and_records_offsets():
    sample = make_sample(20, 18)
    padded, off = pad_to_target(sample, (32, 32))
    assert padded.image.shape == (3, 32, 32)
    assert padded.mask.shape == (1, 32, 32)
    assert (off.top, off.bottom, off.left, off.right) == (6, 6, 7, 7)
    assert np.array_equal(crop_back(padded.image, off), sample.image)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def test_each_method_yields_exactly_three():
    sample = make_sample()
    for method in AUG_METHODS:
        out = augment(sample, method, np.random.default_rng(0))
        assert len(out) == 3
        ids = {s.id for s in out}
        assert len(ids) == 3 and sample.id not in ids


def test_unknown_method_rejected():
    with pytest.raises(ValueError, match="unknown augmentation"):
        augment(make_sample(), "cutmix", np.random.default_rng(0))


def test_horizontal_flip_is_an_involution():
    sample = make_sample()
    flipped = augment(sample, "flips", np.random.default_rng(0))[0]
    assert parse_lineage(flipped.lineage) == ("flips", sample.id)
    again = augment(flipped, "flips", np.random.default_rng(0))[0]
    assert np.array_equal(again.image, sample.image)
    assert np.array_equal(again.mask, sample.mask)


def test_vertical_and_diagonal_flips():
    sample = make_sample()
    _, vert, diag = augment(sample, "flips", np.random.default_rng(0))
    assert np.array_equal(vert.image, sample.image[:, ::-1, :])
    assert np.array_equal(diag.image, np.swapaxes(sample.image, 1, 2))


def test_diagonal_flip_requires_square():
    sample = make_sample(16, 24)
    with pytest.raises(ValueError, match="square"):
        augment(sample, "flips", np.random.default_rng(0))


def test_flips_preserve_positive_count_exactly():
    sample = make_sample()
    for out in augment(sample, "flips", np.random.default_rng(0)):
        assert out.mask.sum() == sample.mask.sum()


def test_gaussian_noise_touches_image_only():
    sample = make_sample()
    for out in augment(sample, "gaussian_noise", np.random.default_rng(1)):
        assert out.mask is sample.mask or np.array_equal(out.mask, sample.mask)
        assert not np.array_equal(out.image, sample.image)
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0


def test_color_jitter_touches_image_only_and_stays_in_range():
    sample = make_sample()
    for out in augment(sample, "color_jitter", np.random.default_rng(2)):
        assert np.array_equal(out.mask, sample.mask)
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0


def test_rotation_by_90_degrees_matches_index_map():
    sample = make_sample(16, 16, seed=3)
    rotated_mask = _rotate_planes(sample.mask, 90.0, nearest=True)
    # (r, c) -> (c, H-1-r)
    expected = np.rot90(sample.mask, k=-1, axes=(1, 2))
    assert np.array_equal(rotated_mask, expected)
    rotated_image = _rotate_planes(sample.image, 90.0, nearest=False)
    np.testing.assert_allclose(rotated_image, np.rot90(sample.image, k=-1, axes=(1, 2)), atol=1e-5)


def test_rotation_keeps_mask_binary_and_roughly_preserves_area():
    # vessels confined to the inscribed disk, like a fundus field of view
    samples = generate_synthetic_dataset(4, size=(64, 64), rng=np.random.default_rng(4))
    rng = np.random.default_rng(5)
    for sample in samples:
        for out in augment(sample, "rotate", rng):
            assert set(np.unique(out.mask)).issubset({0.0, 1.0})
            before = sample.mask.sum()
            after = out.mask.sum()
            assert abs(after - before) / before < 0.05


def test_build_augmented_set_returns_originals_when_target_equals_count():
    originals = [make_sample(seed=i, sid=f"s{i}") for i in range(5)]
    out = build_augmented_set(originals, np.random.default_rng(0), target_total=5)
    assert out == originals


def test_build_augmented_set_reaches_exact_target():
    originals = [make_sample(seed=i, sid=f"s{i}") for i in range(20)]
    out = build_augmented_set(originals, np.random.default_rng(1), target_total=256)
    assert len(out) == 256
    n_originals = sum(1 for s in out if s.lineage == "original")
    assert n_originals == 20
    for s in out:
        if s.lineage == "original":
            continue
        method, parent = parse_lineage(s.lineage)
        assert method in AUG_METHODS
        assert parent in {o.id for o in originals}


def test_build_augmented_set_is_deterministic():
    originals = [make_sample(seed=i, sid=f"s{i}") for i in range(4)]
    a = build_augmented_set(originals, np.random.default_rng(7), target_total=30)
    b = build_augmented_set(originals, np.random.default_rng(7), target_total=30)
    assert [s.id for s in a] == [s.id for s in b]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))


def test_build_augmented_set_errors():
    originals = [make_sample(sid="a")]
    with pytest.raises(ValueError, match="below"):
        build_augmented_set(originals, np.random.default_rng(0), target_total=0)
    with pytest.raises(ValueError, match="cannot reach"):
        build_augmented_set(originals, np.random.default_rng(0), target_total=100)
    with pytest.raises(ValueError, match="no samples"):
        build_augmented_set([], np.random.default_rng(0), target_total=10)


def test_split_validation_sizes_and_determinism():
    samples = [make_sample(seed=i, sid=f"s{i}") for i in range(16)]
    train, val = split_validation(samples, 3, np.random.default_rng(9))
    assert len(train) == 13 and len(val) == 3
    assert {s.id for s in train} | {s.id for s in val} == {s.id for s in samples}
    assert not ({s.id for s in train} & {s.id for s in val})
    train2, val2 = split_validation(samples, 3, np.random.default_rng(9))
    assert [s.id for s in val] == [s.id for s in val2]


def test_split_validation_drive_and_chase_defaults():
    samples = [make_sample(seed=i, sid=f"s{i}") for i in range(256)]
    train, val = split_validation(samples, 26, np.random.default_rng(0))
    assert (len(train), len(val)) == (230, 26)
    train, val = split_validation(samples, 13, np.random.default_rng(0))
    assert (len(train), len(val)) == (243, 13)


def test_split_validation_range_check():
    with pytest.raises(ValueError, match="out of range"):
        split_validation([make_sample()], 1, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def test_synthetic_dataset_positive_fraction_bounds():
    samples = generate_synthetic_dataset(1000, size=(64, 64), rng=np.random.default_rng(11))
    for s in samples:
        frac = s.mask.mean()
        assert 0.03 <= frac <= 0.20


def test_synthetic_dataset_values_and_shapes():
    samples = generate_synthetic_dataset(5, size=(32, 64), rng=np.random.default_rng(12))
    for s in samples:
        assert s.image.shape == (3, 32, 64)
        assert s.mask.shape == (1, 32, 64)
        assert set(np.unique(s.mask)).issubset({0.0, 1.0})
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_synthetic_dataset_is_deterministic():
    a = generate_synthetic_dataset(3, rng=np.random.default_rng(13))
    b = generate_synthetic_dataset(3, rng=np.random.default_rng(13))
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.mask, sb.mask)


def test_synthetic_dataset_rejects_bad_size():
    with pytest.raises(ValueError, match="divisible"):
        generate_synthetic_dataset(1, size=(30, 64))


# ---------------------------------------------------------------------------
# manifest and raster I/O
# ---------------------------------------------------------------------------


def write_dataset(tmp_path, n=3):
    samples = generate_synthetic_dataset(n, rng=np.random.default_rng(20))
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    entries = []
    for i, s in enumerate(samples):
        save_image(s.image, tmp_path / "images" / f"{s.id}.png")
        save_mask(s.mask, tmp_path / "masks" / f"{s.id}.png")
        entries.append(
            ManifestEntry(
                id=s.id,
                image_path=f"images/{s.id}.png",
                mask_path=f"masks/{s.id}.png",
                fov_path=None,
                split="train" if i < n - 1 else "test",
            )
        )
    manifest = DatasetManifest(name="tiny", pad_target=(64, 64), samples=entries)
    save_manifest(manifest, tmp_path / "manifest.jsonl")
    return samples, manifest


def test_manifest_round_trip_is_lossless(tmp_path):
    _, manifest = write_dataset(tmp_path)
    loaded = load_manifest(tmp_path / "manifest.jsonl")
    assert loaded.name == manifest.name
    assert loaded.pad_target == manifest.pad_target
    assert loaded.samples == manifest.samples


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "missing.jsonl")
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ManifestError, match="empty"):
        load_manifest(empty)
    header_only = tmp_path / "header.jsonl"
    header_only.write_text('{"name": "x", "pad_target": [64, 64]}\n')
    with pytest.raises(ManifestError, match="no samples"):
        load_manifest(header_only)
    dup = tmp_path / "dup.jsonl"
    dup.write_text(
        '{"name": "x", "pad_target": [64, 64]}\n'
        '{"id": "a", "image": "i.png", "mask": "m.png", "fov": null, "split": "train"}\n'
        '{"id": "a", "image": "i.png", "mask": "m.png", "fov": null, "split": "train"}\n'
    )
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(dup)
    bad_split = tmp_path / "split.jsonl"
    bad_split.write_text(
        '{"name": "x", "pad_target": [64, 64]}\n'
        '{"id": "a", "image": "i.png", "mask": "m.png", "fov": null, "split": "holdout"}\n'
    )
    with pytest.raises(ManifestError, match="invalid split"):
        load_manifest(bad_split)
    with pytest.raises(ManifestError, match="divisible by 16"):
        DatasetManifest(name="x", pad_target=(60, 64))


def test_load_sample_round_trip(tmp_path):
    samples, _ = write_dataset(tmp_path)
    manifest = load_manifest(tmp_path / "manifest.jsonl")
    loaded = load_sample(manifest.samples[0], manifest.base_dir)
    assert np.array_equal(loaded.mask, samples[0].mask)
    # 8-bit quantization on the image
    assert np.abs(loaded.image - samples[0].image).max() <= 1.0 / 255.0 + 1e-6


def test_load_sample_missing_file(tmp_path):
    entry = ManifestEntry(id="x", image_path="nope.png", mask_path="nope.png", fov_path=None, split="train")
    with pytest.raises(ManifestError, match="missing file"):
        load_sample(entry, tmp_path)


def test_mask_png_round_trip_is_exact(tmp_path):
    mask = (np.random.default_rng(21).random((1, 32, 32)) > 0.5).astype(np.float32)
    save_mask(mask, tmp_path / "m.png")
    assert np.array_equal(load_mask(tmp_path / "m.png"), mask)


def test_overlay_dims_match_input(tmp_path):
    sample = make_sample(20, 26)
    write_overlay(sample.image, sample.mask, tmp_path / "o.png")
    from PIL import Image

    with Image.open(tmp_path / "o.png") as img:
        assert img.size == (26, 20)
