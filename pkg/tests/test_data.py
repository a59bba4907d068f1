import json

import numpy as np
import pytest

from morphpose.data import (
    DomainSplit,
    SyntheticSpec,
    build_sim2sim_benchmark,
    extract_silhouette,
    file_sha256,
    gen_synthetic,
    load_image,
    load_sealed_affine,
    read_annotations,
    save_image,
    sim2sim_specs,
    write_annotations,
    write_split,
)
from morphpose.errors import ConfigError
from morphpose.warp import KeypointSet


def canonical_worm_spec(size=64, **kw):
    base = dict(animal="worm", size=size, seed=3, curvature_range=(0.0, 0.0),
                rotation_range_deg=(0.0, 0.0), translation_frac=0.0)
    base.update(kw)
    return SyntheticSpec(**base)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def test_worm_canonical_pose_is_horizontal_centered_capsule():
    size = 128
    spec = canonical_worm_spec(size=size)
    sample = gen_synthetic(spec, 1)[0]
    c = (size - 1) / 2.0
    half_len = spec.length_frac * (size - 1) / 2.0

    kp = sample.keypoints
    assert kp.names[0] == "head" and kp.names[-1] == "tail"
    np.testing.assert_allclose(kp.xy[0], [c - half_len, c], atol=0.5)
    np.testing.assert_allclose(kp.xy[-1], [c + half_len, c], atol=0.5)
    # horizontal: mask rows are symmetric about the center row
    ys, xs = np.nonzero(sample.mask)
    assert abs(ys.mean() - c) < 1.0
    assert abs(xs.mean() - c) < 1.0
    assert ys.max() - ys.min() < xs.max() - xs.min()


def test_mask_matches_image_support_on_random_draws():
    spec = SyntheticSpec(animal="worm", size=64, seed=11)
    for sample in gen_synthetic(spec, 100):
        np.testing.assert_array_equal(sample.image > 0, sample.mask.astype(bool))


def test_generation_deterministic_under_seed():
    spec = SyntheticSpec(animal="worm", size=64, seed=5)
    a = gen_synthetic(spec, 3)
    b = gen_synthetic(spec, 3)
    for s1, s2 in zip(a, b):
        np.testing.assert_array_equal(s1.image, s2.image)
        np.testing.assert_array_equal(s1.mask, s2.mask)
        np.testing.assert_array_equal(s1.keypoints.xy, s2.keypoints.xy)


def test_fish_template_keypoints():
    spec = SyntheticSpec(animal="fish", size=64, seed=2, curvature_range=(-0.9, 0.9))
    samples = gen_synthetic(spec, 5)
    for s in samples:
        assert s.keypoints.names == ["eye_left", "eye_right", "tail_tip"]
        assert s.mask.any()
        np.testing.assert_array_equal(s.image > 0, s.mask.astype(bool))


def test_degenerate_template_rejected():
    with pytest.raises(ValueError):
        SyntheticSpec(animal="worm", length_frac=0.0)


def test_fly_requires_source_dir():
    with pytest.raises(ConfigError):
        gen_synthetic(SyntheticSpec(animal="fly"), 1)


def test_fly_ingestion_roundtrip(tmp_path):
    # stand-in for externally rendered frames: reuse worm rasters with fly names
    spec = SyntheticSpec(animal="worm", size=64, seed=9)
    samples = gen_synthetic(spec, 4)
    src = tmp_path / "fly_renders"
    (src / "images").mkdir(parents=True)
    (src / "masks").mkdir()
    records = []
    for i, s in enumerate(samples):
        name = f"fly_{i:05d}.png"
        save_image(src / "images" / name, s.image)
        save_image(src / "masks" / name, s.mask.astype(np.float32))
        records.append((f"images/{name}", s.keypoints))
    write_annotations(src / "annotations.txt", records, "fly")

    loaded = gen_synthetic(SyntheticSpec(animal="fly", source_dir=str(src)), 3)
    assert len(loaded) == 3
    np.testing.assert_array_equal(loaded[0].mask, samples[0].mask)
    with pytest.raises(ConfigError):
        gen_synthetic(SyntheticSpec(animal="fly", source_dir=str(src)), 10)


# ---------------------------------------------------------------------------
# silhouette extraction
# ---------------------------------------------------------------------------


def test_extract_silhouette_recovers_generator_mask_exactly():
    spec = SyntheticSpec(animal="worm", size=64, seed=13)
    for sample in gen_synthetic(spec, 100):
        recovered = extract_silhouette(sample.image, bg="black", tol=0.02)
        np.testing.assert_array_equal(recovered, sample.mask)


def test_extract_silhouette_removes_salt_noise():
    spec = SyntheticSpec(animal="worm", size=64, seed=17)
    sample = gen_synthetic(spec, 1)[0]
    rng = np.random.RandomState(0)
    noisy = sample.image.copy()
    salt = rng.rand(*noisy.shape) < 0.005
    salt &= ~ndi_dilate(sample.mask)  # keep specks isolated from the body
    noisy[salt] = 1.0
    recovered = extract_silhouette(noisy, bg="black", tol=0.02)
    np.testing.assert_array_equal(recovered, sample.mask)


def ndi_dilate(mask):
    from scipy import ndimage
    return ndimage.binary_dilation(mask.astype(bool), iterations=2)


def test_extract_silhouette_keyed_background_and_roi():
    img = np.full((32, 32), 0.5, dtype=np.float32)
    img[8:20, 8:20] = 0.9
    roi = np.zeros((32, 32), dtype=bool)
    roi[:, :16] = True
    mask = extract_silhouette(img, bg=("keyed", 0.5), tol=0.05, roi=roi)
    assert mask[10, 10] == 1
    assert mask[10, 18] == 0  # outside ROI


def test_extract_silhouette_empty_warns(caplog):
    import logging
    with caplog.at_level(logging.WARNING):
        mask = extract_silhouette(np.zeros((16, 16)), bg="black")
    assert not mask.any()
    assert any("empty mask" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# IO round trips
# ---------------------------------------------------------------------------


def test_image_roundtrip_bitwise(tmp_path):
    spec = SyntheticSpec(animal="worm", size=64, seed=19)
    sample = gen_synthetic(spec, 1)[0]
    p = tmp_path / "img.png"
    save_image(p, sample.image)
    loaded = load_image(p)
    np.testing.assert_array_equal(loaded, sample.image)  # generator quantizes to the 8-bit grid


def test_annotation_roundtrip(tmp_path):
    kps = KeypointSet(names=["a", "b"], xy=[[1.23456789, 2.0], [3.5, 63.0]],
                      visible=[True, False])
    path = tmp_path / "ann.txt"
    write_annotations(path, [("images/x.png", kps)], "worm")
    rec = read_annotations(path)[0]
    assert rec["image"] == "images/x.png"
    assert rec["animal"] == "worm"
    np.testing.assert_array_equal(rec["keypoints"].xy, kps.xy)
    np.testing.assert_array_equal(rec["keypoints"].visible, kps.visible)


def test_sealed_annotations_guarded(tmp_path):
    kps = KeypointSet(names=["a"], xy=[[1.0, 2.0]])
    path = tmp_path / "sealed.txt"
    write_annotations(path, [("images/x.png", kps)], "worm", sealed=True)
    with pytest.raises(ConfigError):
        read_annotations(path)
    assert len(read_annotations(path, allow_sealed=True)) == 1


def test_split_roundtrip(tmp_path):
    spec = SyntheticSpec(animal="worm", size=64, seed=23)
    samples = gen_synthetic(spec, 4)
    write_split(tmp_path, "source", "unpaired_train", samples, "worm")
    split = DomainSplit(tmp_path, "source", "unpaired_train")
    assert len(split.image_names()) == 4
    images = split.load_images()
    masks = split.load_masks()
    anns = split.load_annotations()
    for i, s in enumerate(samples):
        np.testing.assert_array_equal(images[i], s.image)
        np.testing.assert_array_equal(masks[i], s.mask)
        np.testing.assert_array_equal(anns[i]["keypoints"].xy, s.keypoints.xy)


# ---------------------------------------------------------------------------
# sim2sim benchmark
# ---------------------------------------------------------------------------


def test_benchmark_layout_counts_and_determinism(tmp_path):
    m1 = build_sim2sim_benchmark(tmp_path / "b1", seed=7, size=64)
    assert m1["counts"] == {"source_train": 200, "target_train": 200, "target_test": 100}

    src = DomainSplit(tmp_path / "b1", "source", "unpaired_train")
    tgt = DomainSplit(tmp_path / "b1", "target", "unpaired_train")
    tst = DomainSplit(tmp_path / "b1", "target", "test")
    assert len(src.image_names()) == 200
    assert len(tgt.image_names()) == 200
    assert len(tst.image_names()) == 100
    assert tgt.load_annotations() is None  # unpaired: no keypoints, no index pairing
    assert tst.load_annotations() is None  # GT is sealed, not in the split

    m2 = build_sim2sim_benchmark(tmp_path / "b2", seed=7, size=64)
    assert m1["hashes"] == m2["hashes"]

    manifest_on_disk = json.loads((tmp_path / "b1" / "manifest.json").read_text())
    sealed = tmp_path / "b1" / "sealed" / "target_test_annotations.txt"
    assert manifest_on_disk["hashes"]["sealed_annotations"] == file_sha256(sealed)

    with pytest.raises(ConfigError):
        read_annotations(sealed)
    gt = read_annotations(sealed, allow_sealed=True)
    assert len(gt) == 100

    affine = load_sealed_affine(tmp_path / "b1")
    assert affine["scale"] == 1.15 and affine["rotation_deg"] == 10.0


def test_benchmark_seed_changes_content(tmp_path):
    m1 = build_sim2sim_benchmark(tmp_path / "b1", seed=7, size=64)
    m2 = build_sim2sim_benchmark(tmp_path / "b2", seed=8, size=64)
    assert m1["hashes"]["sealed_annotations"] != m2["hashes"]["sealed_annotations"]


def test_sim2sim_target_applies_hidden_affine():
    # same seed and pose ranges: target draws differ from source draws by
    # fresh sampling, but the configured affine must scale lengths by ~1.15
    source, target = sim2sim_specs(seed=1, size=64)
    assert target.affine == (1.15, 10.0, 0.05, -0.03)
    assert target.half_width_frac == pytest.approx(source.half_width_frac * 1.6)

    straight_src = canonical_worm_spec(size=64, seed=1)
    straight_tgt = canonical_worm_spec(size=64, seed=1, affine=(1.15, 0.0, 0.0, 0.0))
    s = gen_synthetic(straight_src, 1)[0]
    t = gen_synthetic(straight_tgt, 1)[0]
    src_len = np.linalg.norm(s.keypoints.xy[-1] - s.keypoints.xy[0])
    tgt_len = np.linalg.norm(t.keypoints.xy[-1] - t.keypoints.xy[0])
    assert tgt_len / src_len == pytest.approx(1.15, abs=1e-6)
