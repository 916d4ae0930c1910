import numpy as np
import pytest
import torch

from salprune.data import (
    CIFAR_RECORD_BYTES,
    DataError,
    _finalize_splits,
    center_in_box,
    load_cifar10,
    make_synthetic,
    patch_oracle_predict,
    split_indices,
)
from salprune.rng import make_rng


class TestSplit:
    def test_single_ratio(self):
        parts = split_indices(17, (1.0,), seed=0)
        assert len(parts) == 1 and len(parts[0]) == 17

    def test_ninety_ten(self):
        a, b = split_indices(100, (0.9, 0.1), seed=1)
        assert len(a) == 90 and len(b) == 10
        assert set(a.tolist()).isdisjoint(b.tolist())
        assert sorted(a.tolist() + b.tolist()) == list(range(100))

    def test_deterministic(self):
        a1, b1 = split_indices(50, (0.5, 0.5), seed=9)
        a2, b2 = split_indices(50, (0.5, 0.5), seed=9)
        assert torch.equal(a1, a2) and torch.equal(b1, b2)

    def test_invalid_ratios_rejected(self):
        with pytest.raises(ValueError):
            split_indices(10, (0.5, 0.6), seed=0)
        with pytest.raises(ValueError):
            split_indices(10, (-0.1, 1.1), seed=0)

    def test_official_cifar_arithmetic(self):
        splits, prune_ids = _finalize_splits(50000, 10000, seed=0)
        assert len(splits["train"]) == 45000
        assert len(splits["val"]) == 5000
        assert len(splits["test"]) == 10000
        assert len(prune_ids) == 2500  # 5% of the official training set
        train_set = set(splits["train"].tolist())
        assert set(prune_ids.tolist()) <= train_set
        assert train_set.isdisjoint(splits["val"].tolist())


class TestSynthetic:
    def test_deterministic(self):
        a = make_synthetic(n=64, num_classes=4, seed=5)
        b = make_synthetic(n=64, num_classes=4, seed=5)
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.labels, b.labels)
        assert a.fingerprint == b.fingerprint
        c = make_synthetic(n=64, num_classes=4, seed=6)
        assert c.fingerprint != a.fingerprint

    def test_patch_boxes_inside_image(self):
        ds = make_synthetic(n=128, num_classes=4, seed=1)
        for box in ds.patch_boxes:
            z, t, ph, pw = box.tolist()
            assert ph > 0 and pw > 0
            assert 0 <= z and z + ph <= 32
            assert 0 <= t and t + pw <= 32

    def test_oracle_classifies_perfectly(self):
        ds = make_synthetic(n=200, num_classes=6, seed=2)
        ids = torch.arange(len(ds.labels))
        preds = patch_oracle_predict(ds, ids)
        assert torch.equal(preds, ds.labels)

    def test_splits_partition(self):
        ds = make_synthetic(n=300, num_classes=4, seed=3)
        train = set(ds.splits["train"].tolist())
        val = set(ds.splits["val"].tolist())
        test = set(ds.splits["test"].tolist())
        assert train.isdisjoint(val) and train.isdisjoint(test) and val.isdisjoint(test)
        assert train | val | test == set(range(300))
        assert set(ds.prune_ids.tolist()) <= train
        assert len(ds.prune_ids) == round(0.05 * (300 - len(test)))

    def test_normalization_recorded(self):
        ds = make_synthetic(n=120, num_classes=4, seed=4)
        x = ds.images[ds.splits["train"]]
        assert float(x.mean().abs()) < 1e-4
        assert float((x.std(dim=(0, 2, 3)) - 1).abs().max()) < 0.05

    def test_oversized_patch_rejected(self):
        with pytest.raises(ValueError):
            make_synthetic(n=10, patch_hw=(40, 8), seed=0)

    def test_center_in_box(self):
        assert center_in_box(10.0, 12.0, (8, 8, 8, 8))
        assert not center_in_box(20.0, 12.0, (8, 8, 8, 8))


def _write_fake_cifar(root, n_per_batch=4, seed=0):
    rng = np.random.default_rng(seed)
    base = root / "cifar-10-batches-bin"
    base.mkdir(parents=True)
    arrays = {}
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        recs = np.zeros((n_per_batch, CIFAR_RECORD_BYTES), dtype=np.uint8)
        recs[:, 0] = rng.integers(0, 10, n_per_batch)
        recs[:, 1:] = rng.integers(0, 256, (n_per_batch, 3072))
        (base / f"{name}.bin").write_bytes(recs.tobytes())
        arrays[name] = recs
    return base, arrays


class TestCifarLoader:
    def test_record_length_constant(self):
        assert CIFAR_RECORD_BYTES == 3073

    def test_parse_round_trip(self, tmp_path):
        base, arrays = _write_fake_cifar(tmp_path, n_per_batch=6, seed=1)
        ds = load_cifar10(tmp_path, seed=0)
        assert ds.images.shape == (36, 3, 32, 32)
        assert len(ds.splits["train"]) == 27  # 0.9 * 30
        assert len(ds.splits["val"]) == 3
        assert len(ds.splits["test"]) == 6
        assert len(ds.prune_ids) == round(0.05 * 30)
        # first record of data_batch_1: label byte and a pixel sample
        rec = arrays["data_batch_1"][0]
        assert int(ds.labels[0]) == int(rec[0])
        # channel-planar layout: red plane first, row-major
        raw_red_00 = rec[1] / 255.0
        restored = float(ds.images[0, 0, 0, 0] * ds.std[0] + ds.mean[0])
        assert restored == pytest.approx(raw_red_00, abs=1e-5)

    def test_missing_file_rejected(self, tmp_path):
        (tmp_path / "cifar-10-batches-bin").mkdir()
        with pytest.raises(DataError, match="missing"):
            load_cifar10(tmp_path, seed=0)

    def test_truncated_file_rejected(self, tmp_path):
        base, _ = _write_fake_cifar(tmp_path, n_per_batch=2)
        payload = (base / "data_batch_3.bin").read_bytes()
        (base / "data_batch_3.bin").write_bytes(payload[:-10])
        with pytest.raises(DataError, match="multiple"):
            load_cifar10(tmp_path, seed=0)

    def test_bad_label_rejected(self, tmp_path):
        base, _ = _write_fake_cifar(tmp_path, n_per_batch=2)
        recs = np.frombuffer((base / "data_batch_1.bin").read_bytes(),
                             dtype=np.uint8).reshape(2, -1).copy()
        recs[0, 0] = 250
        (base / "data_batch_1.bin").write_bytes(recs.tobytes())
        with pytest.raises(DataError, match="label"):
            load_cifar10(tmp_path, seed=0)

    def test_loader_deterministic(self, tmp_path):
        _write_fake_cifar(tmp_path, n_per_batch=4, seed=3)
        a = load_cifar10(tmp_path, seed=2)
        b = load_cifar10(tmp_path, seed=2)
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.prune_ids, b.prune_ids)
