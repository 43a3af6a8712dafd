"""Dataset loading, augmentation, splits, and episodic sampling."""

import numpy as np
import pytest

from abmnet.episodes import (
    BadMagicError,
    ClassRecord,
    Dataset,
    DatasetError,
    DimensionError,
    EmptyClassError,
    augment_rotations,
    dataset_from_arrays,
    episode_image_batch,
    load_dataset,
    sample_episode,
    split_classes,
)


def tagged_dataset(num_classes=6, per_class=8, h=4, w=4):
    """Every image is a unique constant encoding (class, index)."""
    records = []
    for cid in range(num_classes):
        imgs = np.stack(
            [np.full((h, w, 1), (cid * 100 + i) / 10_000.0, dtype=np.float32) for i in range(per_class)]
        )
        records.append(ClassRecord(cid, f"c{cid}", imgs))
    ds = Dataset("tagged", h, w, 1, records)
    ds.validate()
    return ds


def tag_of(image) -> tuple[int, int]:
    v = int(round(float(image.flat[0]) * 10_000))
    return divmod(v, 100)


class TestFromArrays:
    def test_groups_by_label(self):
        images = np.zeros((10, 4, 4), dtype=np.float32)
        labels = np.array([3, 1, 3, 1, 1, 9, 3, 9, 1, 1])
        ds = dataset_from_arrays(images, labels)
        assert ds.num_classes == 3
        assert [r.id for r in ds.classes] == [0, 1, 2]
        assert [r.name for r in ds.classes] == ["1", "3", "9"]
        assert [len(r.images) for r in ds.classes] == [5, 3, 2]
        assert ds.channels == 1

    def test_uint8_scaled_to_unit_interval(self):
        images = np.full((2, 3, 3), 255, dtype=np.uint8)
        ds = dataset_from_arrays(images, [0, 1])
        assert ds.classes[0].images.max() == pytest.approx(1.0)
        assert ds.classes[0].images.dtype == np.float32

    def test_out_of_range_floats_rescaled(self):
        images = np.stack([np.full((3, 3), -2.0), np.full((3, 3), 6.0)])
        ds = dataset_from_arrays(images, [0, 1])
        lo = ds.classes[0].images.min()
        hi = ds.classes[1].images.max()
        assert 0.0 <= lo <= hi <= 1.0

    def test_count_mismatch(self):
        with pytest.raises(DatasetError):
            dataset_from_arrays(np.zeros((3, 2, 2)), [0, 1])

    def test_bad_rank(self):
        with pytest.raises(DimensionError):
            dataset_from_arrays(np.zeros((3, 2)), [0, 1, 2])


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + b"".join(
        int(d).to_bytes(4, "big") for d in array.shape
    )
    path.write_bytes(header + array.tobytes())


class TestIdx:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(12, 6, 6), dtype=np.uint8)
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2], dtype=np.uint8)
        write_idx(tmp_path / "img.idx", images)
        write_idx(tmp_path / "lab.idx", labels)
        ds = load_dataset("idx", path=str(tmp_path / "img.idx"), labels_path=str(tmp_path / "lab.idx"))
        assert ds.num_classes == 3
        assert all(len(r.images) == 4 for r in ds.classes)
        # image bytes survive the load exactly, up to the 1/255 scale
        first_zero = images[0].astype(np.float32) / 255.0
        assert np.array_equal(ds.classes[0].images[0][..., 0], first_zero)

    def test_big_endian_dims(self, tmp_path):
        # 300 rows forces a dimension byte beyond the low octet
        images = np.zeros((300, 2, 2), dtype=np.uint8)
        labels = np.zeros(300, dtype=np.uint8)
        write_idx(tmp_path / "img.idx", images)
        write_idx(tmp_path / "lab.idx", labels)
        ds = load_dataset("idx", path=str(tmp_path / "img.idx"), labels_path=str(tmp_path / "lab.idx"))
        assert len(ds.classes[0].images) == 300

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.idx").write_bytes(b"\x01\x00\x08\x03" + b"\x00" * 16)
        with pytest.raises(BadMagicError):
            load_dataset("idx", path=str(tmp_path / "bad.idx"), labels_path=str(tmp_path / "bad.idx"))

    def test_wrong_element_type(self, tmp_path):
        (tmp_path / "f.idx").write_bytes(bytes([0, 0, 0x0D, 1]) + (4).to_bytes(4, "big") + b"\x00" * 16)
        with pytest.raises(BadMagicError, match="element type"):
            load_dataset("idx", path=str(tmp_path / "f.idx"), labels_path=str(tmp_path / "f.idx"))

    def test_truncated_body(self, tmp_path):
        header = bytes([0, 0, 0x08, 1]) + (10).to_bytes(4, "big")
        (tmp_path / "t.idx").write_bytes(header + b"\x00" * 4)
        with pytest.raises(DimensionError, match="promises"):
            load_dataset("idx", path=str(tmp_path / "t.idx"), labels_path=str(tmp_path / "t.idx"))

    def test_labels_required(self, tmp_path):
        write_idx(tmp_path / "img.idx", np.zeros((2, 2, 2), dtype=np.uint8))
        with pytest.raises(DatasetError, match="labels_path"):
            load_dataset("idx", path=str(tmp_path / "img.idx"))

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "img.idx", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "lab.idx", np.zeros(2, dtype=np.uint8))
        with pytest.raises(DimensionError):
            load_dataset("idx", path=str(tmp_path / "img.idx"), labels_path=str(tmp_path / "lab.idx"))


class TestImageDirs:
    def test_leaf_directories_become_classes(self, tmp_path):
        from PIL import Image

        for cname, shade in (("alpha", 10), ("beta", 200)):
            d = tmp_path / "root" / cname
            d.mkdir(parents=True)
            for i in range(3):
                Image.fromarray(np.full((5, 5), shade + i, dtype=np.uint8), mode="L").save(d / f"{i}.png")
        ds = load_dataset("image-dirs", path=str(tmp_path / "root"))
        assert ds.num_classes == 2
        assert [r.name for r in ds.classes] == ["alpha", "beta"]
        assert ds.channels == 1 and ds.height == 5
        assert ds.classes[0].images[0].max() <= 1.0

    def test_empty_class_dir(self, tmp_path):
        from PIL import Image

        good = tmp_path / "root" / "good"
        good.mkdir(parents=True)
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(good / "a.png")
        bad = tmp_path / "root" / "bad"
        bad.mkdir()
        (bad / "notes.txt").write_text("not an image")
        with pytest.raises(EmptyClassError):
            load_dataset("image-dirs", path=str(tmp_path / "root"))

    def test_inconsistent_sizes(self, tmp_path):
        from PIL import Image

        d = tmp_path / "root" / "c"
        d.mkdir(parents=True)
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(d / "a.png")
        Image.fromarray(np.zeros((6, 6), dtype=np.uint8), mode="L").save(d / "b.png")
        with pytest.raises(DimensionError):
            load_dataset("image-dirs", path=str(tmp_path / "root"))

    def test_unknown_format(self):
        with pytest.raises(DatasetError, match="unknown dataset format"):
            load_dataset("parquet")


class TestSynthetic:
    def test_deterministic(self):
        a = load_dataset("synthetic", synthetic={"seed": 7, "classes": 4, "images_per_class": 3})
        b = load_dataset("synthetic", synthetic={"seed": 7, "classes": 4, "images_per_class": 3})
        for ra, rb in zip(a.classes, b.classes):
            assert np.array_equal(ra.images, rb.images)

    def test_seed_changes_content(self):
        a = load_dataset("synthetic", synthetic={"seed": 1, "classes": 2, "images_per_class": 2})
        b = load_dataset("synthetic", synthetic={"seed": 2, "classes": 2, "images_per_class": 2})
        assert not np.array_equal(a.classes[0].images, b.classes[0].images)

    def test_shapes_and_range(self):
        ds = load_dataset(
            "synthetic",
            synthetic={"seed": 0, "classes": 3, "images_per_class": 5, "height": 16, "width": 20},
        )
        assert (ds.height, ds.width, ds.channels) == (16, 20, 1)
        for rec in ds.classes:
            assert rec.images.shape == (5, 16, 20, 1)
            assert rec.images.min() >= 0.0 and rec.images.max() <= 1.0
            assert rec.images.max() > 0.5  # strokes actually drawn

    def test_classes_differ_more_than_within_class(self):
        ds = load_dataset("synthetic", synthetic={"seed": 3, "classes": 6, "images_per_class": 6})
        within, between = [], []
        flat = [rec.images.reshape(len(rec.images), -1) for rec in ds.classes]
        for c, imgs in enumerate(flat):
            within.append(np.linalg.norm(imgs[0] - imgs[1]))
            between.append(np.linalg.norm(imgs[0] - flat[(c + 1) % len(flat)][0]))
        assert np.mean(between) > 2.0 * np.mean(within)

    def test_unknown_option(self):
        with pytest.raises(DatasetError, match="unknown synthetic"):
            load_dataset("synthetic", synthetic={"seed": 0, "nclass": 5})


class TestRotations:
    def test_quarter_turn_oracle(self):
        base = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)[None, ..., None] / 4.0
        ds = Dataset("t", 2, 2, 1, [ClassRecord(0, "x", base)])
        out = augment_rotations(ds)
        assert out.num_classes == 4
        quarter = out.classes[1].images[0][..., 0] * 4.0
        assert np.array_equal(quarter, np.array([[3.0, 1.0], [4.0, 2.0]], dtype=np.float32))

    def test_zero_rotation_bit_exact(self):
        ds = tagged_dataset(2, 3)
        out = augment_rotations(ds)
        assert np.array_equal(out.classes[0].images, ds.classes[0].images)

    def test_half_turn_is_double_flip(self):
        rng = np.random.default_rng(0)
        base = rng.random((2, 6, 6, 1), dtype=np.float32)
        ds = Dataset("t", 6, 6, 1, [ClassRecord(0, "x", base)])
        out = augment_rotations(ds)
        assert np.array_equal(out.classes[2].images, base[:, ::-1, ::-1, :])

    def test_four_variants_distinct_for_asymmetric_image(self):
        img = np.zeros((1, 4, 4, 1), dtype=np.float32)
        img[0, 0, 0, 0] = 1.0
        img[0, 0, 1, 0] = 0.5
        ds = Dataset("t", 4, 4, 1, [ClassRecord(0, "x", img)])
        out = augment_rotations(ds)
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.array_equal(out.classes[i].images, out.classes[j].images)

    def test_names_and_dense_ids(self):
        ds = tagged_dataset(3, 2)
        out = augment_rotations(ds)
        assert [r.id for r in out.classes] == list(range(12))
        assert out.classes[5].name == "c1@90"

    def test_rejects_non_square(self):
        ds = Dataset("t", 2, 3, 1, [ClassRecord(0, "x", np.zeros((1, 2, 3, 1), dtype=np.float32))])
        with pytest.raises(DimensionError):
            augment_rotations(ds)


class TestSplits:
    def test_fractions_partition_classes(self):
        ds = tagged_dataset(10, 4)
        tr, va, te = split_classes(ds, np.random.default_rng(0), fractions=(0.6, 0.2, 0.2))
        assert (tr.num_classes, va.num_classes, te.num_classes) == (6, 2, 2)
        names = [r.name for part in (tr, va, te) for r in part.classes]
        assert sorted(names) == sorted(r.name for r in ds.classes)
        for part in (tr, va, te):
            assert [r.id for r in part.classes] == list(range(part.num_classes))

    def test_fractions_deterministic_in_rng(self):
        ds = tagged_dataset(10, 4)
        a = split_classes(ds, np.random.default_rng(5), fractions=(0.5, 0.3, 0.2))
        b = split_classes(ds, np.random.default_rng(5), fractions=(0.5, 0.3, 0.2))
        assert [r.name for r in a[0].classes] == [r.name for r in b[0].classes]

    def test_explicit_lists(self):
        ds = tagged_dataset(6, 4)
        tr, va, te = split_classes(ds, np.random.default_rng(0), train=[0, 1, 2], val=[3], test=[4, 5])
        assert [r.name for r in tr.classes] == ["c0", "c1", "c2"]
        assert [r.name for r in va.classes] == ["c3"]
        assert [r.name for r in te.classes] == ["c4", "c5"]

    def test_shared_val_test_classes_split_image_pools(self):
        ds = tagged_dataset(10, 8)
        held = [5, 6, 7, 8, 9]
        tr, va, te = split_classes(ds, np.random.default_rng(1), train=[0, 1, 2, 3, 4], val=held, test=held)
        assert [r.name for r in va.classes] == [r.name for r in te.classes]
        for rv, rt, cid in zip(va.classes, te.classes, held):
            tags_v = {tag_of(img) for img in rv.images}
            tags_t = {tag_of(img) for img in rt.images}
            assert not tags_v & tags_t
            full = {tag_of(img) for img in ds.classes[cid].images}
            assert tags_v | tags_t == full

    def test_train_overlap_rejected(self):
        ds = tagged_dataset(4, 4)
        with pytest.raises(DatasetError, match="overlap"):
            split_classes(ds, np.random.default_rng(0), train=[0, 1], val=[1], test=[2])

    def test_out_of_range_class(self):
        ds = tagged_dataset(4, 4)
        with pytest.raises(DatasetError, match="out of range"):
            split_classes(ds, np.random.default_rng(0), train=[0, 9], val=[1], test=[2])

    def test_fractions_and_lists_exclusive(self):
        ds = tagged_dataset(4, 4)
        with pytest.raises(DatasetError):
            split_classes(ds, np.random.default_rng(0), fractions=(0.5, 0.25, 0.25), train=[0])

    def test_bad_fractions(self):
        ds = tagged_dataset(4, 4)
        with pytest.raises(DatasetError):
            split_classes(ds, np.random.default_rng(0), fractions=(0.5, 0.2, 0.2))


class TestClosedEpisodes:
    def test_structure(self):
        ds = tagged_dataset(8, 6)
        ep = sample_episode(ds, way=5, shot=1, queries=3, open_set=False, rng=np.random.default_rng(0))
        assert ep.way == 5 and ep.open_class is None
        assert len(ep.supports) == 5
        assert sorted(lab for _, lab in ep.supports) == [1, 2, 3, 4, 5]
        assert len(ep.queries) == 3
        assert all(1 <= lab <= 5 for _, lab in ep.queries)

    def test_multi_shot_labels(self):
        ds = tagged_dataset(8, 6)
        ep = sample_episode(ds, way=3, shot=2, queries=1, open_set=False, rng=np.random.default_rng(1))
        assert len(ep.supports) == 6
        assert sorted(lab for _, lab in ep.supports) == [1, 1, 2, 2, 3, 3]
        # same-label supports come from the same class and are distinct images
        by_label = {}
        for img, lab in ep.supports:
            by_label.setdefault(lab, []).append(tag_of(img))
        for tags in by_label.values():
            assert len({c for c, _ in tags}) == 1
            assert len(set(tags)) == 2

    def test_query_images_disjoint_from_supports(self):
        ds = tagged_dataset(6, 4)
        for seed in range(50):
            ep = sample_episode(ds, way=4, shot=2, queries=4, open_set=False, rng=np.random.default_rng(seed))
            support_tags = {tag_of(img) for img, _ in ep.supports}
            for img, _ in ep.queries:
                assert tag_of(img) not in support_tags

    def test_query_label_matches_class(self):
        ds = tagged_dataset(6, 4)
        ep = sample_episode(ds, way=4, shot=1, queries=6, open_set=False, rng=np.random.default_rng(3))
        label_to_class = {lab: tag_of(img)[0] for img, lab in ep.supports}
        for img, lab in ep.queries:
            assert tag_of(img)[0] == label_to_class[lab]

    def test_support_class_frequency_uniform(self):
        ds = tagged_dataset(20, 2)
        rng = np.random.default_rng(42)
        counts = np.zeros(20)
        trials = 10_000
        for _ in range(trials):
            ep = sample_episode(ds, way=5, shot=1, queries=1, open_set=False, rng=rng)
            for img, _ in ep.supports:
                counts[tag_of(img)[0]] += 1
        p = 5 / 20
        sigma = np.sqrt(trials * p * (1 - p))
        assert np.all(np.abs(counts - trials * p) < 5 * sigma)

    def test_seed_recorded(self):
        ds = tagged_dataset(6, 4)
        ep = sample_episode(ds, 3, 1, 1, False, np.random.default_rng(0), seed=123)
        assert ep.seed == 123

    def test_preconditions(self):
        ds = tagged_dataset(4, 2)
        with pytest.raises(DatasetError):
            sample_episode(ds, way=5, shot=1, queries=1, open_set=False, rng=np.random.default_rng(0))
        with pytest.raises(DatasetError):
            sample_episode(ds, way=3, shot=2, queries=1, open_set=False, rng=np.random.default_rng(0))
        with pytest.raises(DatasetError):
            sample_episode(ds, way=1, shot=1, queries=1, open_set=False, rng=np.random.default_rng(0))


class TestOpenEpisodes:
    def test_structure(self):
        ds = tagged_dataset(8, 6)
        ep = sample_episode(ds, way=5, shot=1, queries=4, open_set=True, rng=np.random.default_rng(0))
        assert ep.open_class is not None
        assert len(ep.supports) == 4
        assert sorted(lab for _, lab in ep.supports) == [1, 2, 3, 4]
        support_classes = {tag_of(img)[0] for img, _ in ep.supports}
        assert ep.open_class not in support_classes

    def test_open_queries_come_from_held_out_class(self):
        ds = tagged_dataset(8, 6)
        for seed in range(40):
            ep = sample_episode(ds, way=4, shot=1, queries=5, open_set=True, rng=np.random.default_rng(seed))
            for img, lab in ep.queries:
                cls = tag_of(img)[0]
                if lab == 0:
                    assert cls == ep.open_class
                else:
                    assert cls != ep.open_class

    def test_open_rate_near_one_over_way(self):
        ds = tagged_dataset(12, 4)
        rng = np.random.default_rng(7)
        trials = 4000
        opens = 0
        for _ in range(trials):
            ep = sample_episode(ds, way=5, shot=1, queries=1, open_set=True, rng=rng)
            opens += ep.queries[0][1] == 0
        p = 1 / 5
        sigma = np.sqrt(trials * p * (1 - p))
        assert abs(opens - trials * p) < 5 * sigma

    def test_held_out_class_never_supports(self):
        ds = tagged_dataset(6, 5)
        rng = np.random.default_rng(11)
        for _ in range(100):
            ep = sample_episode(ds, way=3, shot=1, queries=2, open_set=True, rng=rng)
            assert ep.open_class not in {tag_of(img)[0] for img, _ in ep.supports}


class TestBatch:
    def test_supports_then_queries_channel_first(self):
        ds = tagged_dataset(5, 4, h=4, w=3)
        ep = sample_episode(ds, way=3, shot=1, queries=2, open_set=False, rng=np.random.default_rng(0))
        batch = episode_image_batch(ep)
        assert batch.shape == (5, 1, 4, 3)
        assert np.array_equal(batch[0, 0], ep.supports[0][0][..., 0])
        assert np.array_equal(batch[4, 0], ep.queries[1][0][..., 0])
