import numpy as np
import pytest
from PIL import Image

from idcnet.data import (ArrayDataset, PatchDataset, PatchRecord, SplitPlan, batches,
                         decode_patch, load_patch, make_split, normalize_image,
                         pad_to_canonical, parse_patch_path, scan_dataset,
                         synthetic_dataset, write_synthetic_dataset)


def record(label, patient="p1", x=0, y=0, path=None):
    path = path or f"{patient}_idx5_x{x}_y{y}_class{label}.png"
    return PatchRecord(patient_id=patient, x=x, y=y, label=label, path=path)


def make_records(n_pos, n_neg, patients=4):
    recs = []
    for i in range(n_pos + n_neg):
        label = 1 if i < n_pos else 0
        patient = f"p{i % patients}"
        recs.append(record(label, patient=patient, x=i * 50, y=0,
                           path=f"{patient}_idx5_x{i * 50}_y0_class{label}.png"))
    return recs


class TestParsePatchPath:
    def test_dataset_convention(self):
        r = parse_patch_path("10253_idx5_x1351_y1101_class0.png")
        assert (r.patient_id, r.x, r.y, r.label) == ("10253", 1351, 1101, 0)

    def test_zero_coordinates(self):
        r = parse_patch_path("10253_idx5_x0_y0_class1.png")
        assert (r.x, r.y, r.label) == (0, 0, 1)

    def test_full_path_is_kept(self):
        r = parse_patch_path("/data/10253/0/10253_idx5_x42_y7_class0.png")
        assert r.path == "/data/10253/0/10253_idx5_x42_y7_class0.png"

    @pytest.mark.parametrize("bad", [
        "notes.txt",
        "10253_idx5_x13_y11.png",
        "10253_idx5_x13_y11_class2.png",
        "10253_x13_y11_class0.png",
    ])
    def test_malformed_names_rejected(self, bad):
        with pytest.raises(ValueError):
            parse_patch_path(bad)


class TestScanDataset:
    def test_records_and_skip_report(self, tmp_path):
        d = tmp_path / "8863" / "0"
        d.mkdir(parents=True)
        Image.fromarray(np.zeros((50, 50, 3), np.uint8)).save(
            d / "8863_idx5_x0_y0_class0.png")
        (tmp_path / "notes.txt").write_text("hello")
        records, skipped = scan_dataset(tmp_path)
        assert len(records) == 1
        assert records[0].patient_id == "8863"
        assert len(skipped) == 1 and skipped[0].endswith("notes.txt")

    def test_missing_root(self, tmp_path):
        with pytest.raises(Exception):
            scan_dataset(tmp_path / "absent")


class TestPadToCanonical:
    def test_already_canonical_unchanged(self):
        img = np.random.default_rng(0).integers(0, 255, (50, 50, 3)).astype(np.uint8)
        assert pad_to_canonical(img) is img

    def test_short_rows_zero_padded(self):
        img = np.full((48, 50, 3), 9, np.uint8)
        out = pad_to_canonical(img)
        assert out.shape == (50, 50, 3)
        assert np.all(out[:48] == 9)
        assert np.all(out[48:] == 0)

    def test_both_axes_short(self):
        img = np.full((49, 49, 3), 5, np.uint8)
        out = pad_to_canonical(img)
        assert np.all(out[49, :] == 0) and np.all(out[:, 49] == 0)
        assert np.all(out[:49, :49] == 5)

    def test_prefix_preservation(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 255, (48, 49, 3)).astype(np.uint8)
        out = pad_to_canonical(img)
        assert np.array_equal(out[:48, :49], img)

    @pytest.mark.parametrize("shape", [(47, 50, 3), (51, 50, 3), (50, 47, 3)])
    def test_out_of_range_rejected(self, shape):
        with pytest.raises(ValueError, match=r"4[78]|5[01]"):
            pad_to_canonical(np.zeros(shape, np.uint8))


class TestNormalizeImage:
    def test_two_value_image(self):
        img = np.zeros((50, 50, 3), np.float32)
        img[:25] = 0.0
        img[25:] = 2.0
        out = normalize_image(img)
        assert out.shape == (3, 50, 50)
        assert set(np.unique(out)) == {-1.0, 1.0}

    def test_constant_image_maps_to_zero(self):
        assert np.all(normalize_image(np.full((50, 50, 3), 0.5, np.float32)) == 0.0)

    def test_postcondition_mean_zero_std_one(self):
        rng = np.random.default_rng(2)
        img = rng.random((50, 50, 3)).astype(np.float32)
        out = normalize_image(img)
        assert abs(out.mean()) < 1e-5
        assert abs(out.std() - 1.0) < 1e-5

    def test_per_channel_option(self):
        rng = np.random.default_rng(3)
        img = rng.random((50, 50, 3)).astype(np.float32)
        img[..., 0] *= 5.0
        out = normalize_image(img, per_channel=True)
        for c in range(3):
            assert abs(out[c].mean()) < 1e-4
            assert abs(out[c].std() - 1.0) < 1e-4


class TestDecodeAndLoad:
    def test_decode_pads_short_patch(self, tmp_path):
        img = np.random.default_rng(4).integers(0, 255, (49, 50, 3)).astype(np.uint8)
        p = tmp_path / "x.png"
        Image.fromarray(img).save(p)
        out = decode_patch(p)
        assert out.shape == (50, 50, 3)
        assert np.array_equal(out[:49], img)

    def test_load_patch_is_normalized(self, tmp_path):
        img = np.random.default_rng(5).integers(0, 255, (50, 50, 3)).astype(np.uint8)
        p = tmp_path / "x.png"
        Image.fromarray(img).save(p)
        out = load_patch(p)
        assert out.shape == (3, 50, 50)
        assert abs(out.mean()) < 1e-5

    def test_missing_file(self, tmp_path):
        with pytest.raises(Exception, match="missing"):
            decode_patch(tmp_path / "absent.png")


class TestMakeSplit:
    def test_symmetric_miniature(self):
        recs = make_records(50, 50)
        plan = make_split(recs, seed=1, train_size=60, val_size=20)
        counts = plan.class_counts()
        assert counts["train"] == (30, 30)
        assert counts["val"] == (10, 10)
        assert len(plan.test) == 20
        paths = [r.path for r in plan.train + plan.val + plan.test]
        assert len(set(paths)) == len(paths) == 100

    def test_same_seed_identical_plan(self):
        recs = make_records(60, 140)
        a = make_split(recs, seed=7, train_size=40, val_size=20)
        b = make_split(recs, seed=7, train_size=40, val_size=20)
        assert [r.path for r in a.train] == [r.path for r in b.train]
        assert [r.path for r in a.test] == [r.path for r in b.test]

    def test_different_seed_same_counts_different_membership(self):
        recs = make_records(60, 140)
        a = make_split(recs, seed=1, train_size=40, val_size=20)
        b = make_split(recs, seed=2, train_size=40, val_size=20)
        assert a.class_counts() == b.class_counts()
        assert {r.path for r in a.train} != {r.path for r in b.train}

    def test_infeasible_sizes_name_achievable_maximum(self):
        recs = make_records(5, 95)
        with pytest.raises(ValueError, match="at most 10 balanced"):
            make_split(recs, seed=0, train_size=12, val_size=4)

    def test_disjoint_coverage_balance_over_random_sets(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            n_pos = int(rng.integers(10, 60))
            n_neg = int(rng.integers(10, 60))
            recs = make_records(n_pos, n_neg)
            limit = 2 * min(n_pos, n_neg)
            train_size = int(rng.integers(4, max(5, limit - 4)))
            val_size = min(4, limit - train_size)
            if val_size < 2:
                continue
            plan = make_split(recs, seed=trial, train_size=train_size, val_size=val_size)
            groups = [plan.train, plan.val, plan.test]
            paths = [r.path for g in groups for r in g]
            assert len(paths) == len(set(paths)) == len(recs)
            for g in (plan.train, plan.val):
                pos = sum(r.label for r in g)
                assert abs(len(g) - 2 * pos) <= 1

    def test_fractions(self):
        recs = make_records(100, 100)
        plan = make_split(recs, seed=3, train_frac=0.5, val_frac=0.2)
        assert len(plan.train) == 100
        assert len(plan.val) == 40
        assert len(plan.test) == 60

    def test_patient_level_keeps_patients_disjoint(self):
        recs = make_records(60, 60, patients=12)
        plan = make_split(recs, seed=5, train_size=50, val_size=20, patient_level=True)
        groups = {
            "train": {r.patient_id for r in plan.train},
            "val": {r.patient_id for r in plan.val},
            "test": {r.patient_id for r in plan.test},
        }
        assert not groups["train"] & groups["val"]
        assert not groups["train"] & groups["test"]
        assert not groups["val"] & groups["test"]
        # Coverage including the balancing leftovers.
        total = len(plan.train) + len(plan.val) + len(plan.test) + len(plan.excluded)
        assert total == len(recs)
        for g in (plan.train, plan.val):
            pos = sum(r.label for r in g)
            assert 2 * pos == len(g)

    def test_plan_round_trip(self, tmp_path):
        recs = make_records(20, 20)
        plan = make_split(recs, seed=9, train_size=20, val_size=10)
        path = tmp_path / "split.json"
        plan.save(path)
        loaded = SplitPlan.load(path)
        assert [r.path for r in loaded.train] == [r.path for r in plan.train]
        assert [r.path for r in loaded.val] == [r.path for r in plan.val]
        assert [r.path for r in loaded.test] == [r.path for r in plan.test]
        assert loaded.seed == 9


class TestBatches:
    def make_dataset(self, n):
        rng = np.random.default_rng(0)
        return ArrayDataset(rng.standard_normal((n, 3, 50, 50)).astype(np.float32),
                            np.arange(n) % 2)

    def test_batch_sizes(self):
        ds = self.make_dataset(100)
        sizes = [len(labels) for _, labels in batches(ds, 32, epoch_seed=1)]
        assert sizes == [32, 32, 32, 4]

    def test_identical_epoch_seed_identical_order(self):
        ds = self.make_dataset(20)
        a = [labels.tolist() for _, labels in batches(ds, 8, epoch_seed=42)]
        b = [labels.tolist() for _, labels in batches(ds, 8, epoch_seed=42)]
        assert a == b
        c = [labels.tolist() for _, labels in batches(ds, 8, epoch_seed=43)]
        assert a != c

    def test_label_multiset_partition(self):
        ds = self.make_dataset(37)
        seen = np.concatenate([labels for _, labels in batches(ds, 5, epoch_seed=3)])
        assert sorted(seen.tolist()) == sorted(ds.labels.tolist())

    def test_tensor_shape_and_dtype(self):
        ds = self.make_dataset(7)
        x, labels = next(batches(ds, 4, epoch_seed=0))
        assert x.shape == (4, 3, 50, 50)
        assert x.dtype == np.float32
        assert labels.dtype == np.int64


class TestSyntheticData:
    def test_in_memory_set_is_balanced_and_normalized(self):
        ds = synthetic_dataset(16, seed=1)
        assert len(ds) == 16
        assert ds.labels.sum() == 8
        assert abs(float(ds.images[0].mean())) < 1e-4

    def test_written_set_scans_cleanly(self, tmp_path):
        records = write_synthetic_dataset(tmp_path, 8, seed=2)
        scanned, skipped = scan_dataset(tmp_path)
        assert len(scanned) == 8 and not skipped
        assert {r.path for r in scanned} == {r.path for r in records}
        img = load_patch(records[0].path)
        assert img.shape == (3, 50, 50)

    def test_classes_are_color_separable(self):
        ds = synthetic_dataset(32, seed=3)
        # Red-channel mean minus blue-channel mean separates the classes.
        score = ds.images[:, 0].mean(axis=(1, 2)) - ds.images[:, 2].mean(axis=(1, 2))
        pos, neg = score[ds.labels == 1], score[ds.labels == 0]
        assert pos.min() > neg.max()


class TestPatchDataset:
    def test_cache_round_trip(self, tmp_path):
        records = write_synthetic_dataset(tmp_path, 4, seed=4)
        ds = PatchDataset(records, cache=True)
        first = ds.load(0)
        again = ds.load(0)
        assert again is first
        assert np.array_equal(ds.labels, [r.label for r in records])
