import struct

import numpy as np
import pytest

from streamnet import dataio as D
from streamnet import ppm
from streamnet.errors import ConfigError, FormatError
from streamnet.imaging import make_bands, normalize


def reference_sndt_reader(buf):
    """Byte-at-a-time reader written straight from the layout description."""
    assert buf[0:4] == b"SNDT"
    version, count, c, h, w, k = struct.unpack("<HIHHHH", buf[4:18])
    pos, names = 18, []
    for _ in range(k):
        (n,) = struct.unpack("<H", buf[pos:pos + 2])
        names.append(buf[pos + 2:pos + 2 + n].decode("utf-8"))
        pos += 2 + n
    samples = []
    for _ in range(count):
        (label,) = struct.unpack("<H", buf[pos:pos + 2])
        pixels = list(buf[pos + 2:pos + 2 + c * h * w])
        samples.append((label, pixels))
        pos += 2 + c * h * w
    assert pos == len(buf)
    return version, (c, h, w), names, samples


def write_cifar_dir(root, rng, per_batch):
    files = {}
    for name in (*D.CIFAR10_TRAIN_FILES, D.CIFAR10_TEST_FILE):
        labels = rng.integers(0, 10, size=per_batch, dtype=np.uint8)
        pixels = rng.integers(0, 256, size=(per_batch, 3072), dtype=np.uint8)
        raw = np.concatenate([labels[:, None], pixels], axis=1).tobytes()
        (root / name).write_bytes(raw)
        files[name] = raw
    return files


class TestCifar10:
    def test_record_layout(self):
        img = np.zeros((3, 32, 32), dtype=np.uint8)
        img[0, 0, 1] = 7    # R plane, row 0, col 1
        img[2, 31, 31] = 9  # last B pixel
        buf = D.encode_cifar10_batch(img[None], [3])
        assert len(buf) == 3073
        assert buf[0] == 3 and buf[2] == 7 and buf[-1] == 9

    def test_full_batch_round_trip(self, tmp_path, rng):
        files = write_cifar_dir(tmp_path, rng, 10000)
        for name, raw in files.items():
            assert len(raw) == 30_730_000
            x, y = D.decode_cifar10_batch((tmp_path / name).read_bytes())
            assert D.encode_cifar10_batch(x, y) == raw

    def test_loader_splits_and_ids(self, tmp_path, rng):
        write_cifar_dir(tmp_path, rng, 7)
        train, test = D.load_cifar10(tmp_path, records_per_batch=7)
        assert len(train) == 35 and len(test) == 7
        assert train.class_names[0] == "airplane"
        assert set(train.ids).isdisjoint(test.ids)
        assert train.images.dtype == np.uint8 and train.image_shape == (3, 32, 32)

    def test_missing_file(self, tmp_path, rng):
        write_cifar_dir(tmp_path, rng, 3)
        (tmp_path / "data_batch_3.bin").unlink()
        with pytest.raises(FileNotFoundError, match="data_batch_3"):
            D.load_cifar10(tmp_path, records_per_batch=3)

    def test_wrong_size(self, tmp_path, rng):
        write_cifar_dir(tmp_path, rng, 3)
        with pytest.raises(FormatError, match="expected 30730000 bytes"):
            D.load_cifar10(tmp_path)

    def test_bad_label(self):
        buf = bytes([10]) + bytes(3072)
        with pytest.raises(FormatError, match="label byte 10"):
            D.decode_cifar10_batch(buf)


class TestSndt:
    def _fixture(self, rng, n=10):
        return D.Dataset(rng.integers(0, 256, size=(n, 3, 4, 5), dtype=np.uint8),
                         rng.integers(0, 3, size=n), np.arange(n), ("forest", "river", "sea lake"), "fx")

    def test_reference_reader(self, tmp_path, rng):
        ds = self._fixture(rng)
        D.write_raw_container(tmp_path / "fx.sndt", ds)
        buf = (tmp_path / "fx.sndt").read_bytes()
        version, shape, names, samples = reference_sndt_reader(buf)
        assert version == 1 and shape == (3, 4, 5) and names == list(ds.class_names)
        for i, (label, pixels) in enumerate(samples):
            assert label == ds.labels[i]
            assert pixels == ds.images[i].ravel().tolist()
        back = D.load_raw_container(tmp_path / "fx.sndt")
        assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
        assert D.encode_raw_container(back) == buf

    def test_empty_container(self):
        ds = D.Dataset(np.zeros((0, 3, 8, 8), dtype=np.uint8), [], [], ("a",))
        back = D.decode_raw_container(D.encode_raw_container(ds))
        assert len(back) == 0 and back.image_shape == (3, 8, 8)

    def test_count_mismatch(self, rng):
        buf = bytearray(D.encode_raw_container(self._fixture(rng)))
        struct.pack_into("<I", buf, 6, 11)
        with pytest.raises(FormatError, match="declares 11 samples"):
            D.decode_raw_container(bytes(buf))

    def test_bad_magic(self, rng):
        buf = D.encode_raw_container(self._fixture(rng))
        with pytest.raises(FormatError, match="magic"):
            D.decode_raw_container(b"XNDT" + buf[4:])


class TestPpmDirectory:
    def test_classes_from_subdirectories(self, tmp_path, rng):
        for cls in ("b_river", "a_forest"):
            (tmp_path / cls).mkdir()
            for i in range(2):
                ppm.write_ppm(tmp_path / cls / f"{i}.ppm", rng.integers(0, 256, size=(3, 4, 4), dtype=np.uint8))
        ds = D.load_ppm_directory(tmp_path)
        assert ds.class_names == ("a_forest", "b_river")
        assert ds.labels.tolist() == [0, 0, 1, 1]

    def test_mixed_shapes(self, tmp_path):
        (tmp_path / "a").mkdir()
        ppm.write_ppm(tmp_path / "a" / "0.ppm", np.zeros((3, 4, 4), dtype=np.uint8))
        ppm.write_ppm(tmp_path / "a" / "1.ppm", np.zeros((3, 5, 4), dtype=np.uint8))
        with pytest.raises(FormatError, match="mixed shapes"):
            D.load_ppm_directory(tmp_path)


class TestSplitAndBatch:
    def _ds(self, n=23):
        labels = np.arange(n) % 3
        return D.Dataset(np.zeros((n, 1, 2, 2), dtype=np.uint8), labels, np.arange(100, 100 + n), ("a", "b", "c"))

    def test_batches_cover_every_id_once(self):
        ds = self._ds()
        batches = D.shuffle_and_batch(ds, 5, seed=4)
        assert [len(b) for b in batches] == [5, 5, 5, 5, 3]
        ids = np.concatenate([b.ids for b in batches])
        assert sorted(ids.tolist()) == ds.ids.tolist()

    def test_single_batch_is_permuted(self):
        ds = self._ds()
        (batch,) = D.shuffle_and_batch(ds, len(ds), seed=1)
        assert sorted(batch.ids) == list(ds.ids) and list(batch.ids) != list(ds.ids)

    def test_same_seed_same_order(self):
        ds = self._ds()
        a = [b.ids.tolist() for b in D.shuffle_and_batch(ds, 4, 9)]
        b = [b.ids.tolist() for b in D.shuffle_and_batch(ds, 4, 9)]
        assert a == b

    def test_bad_batch_size(self):
        with pytest.raises(ConfigError):
            D.shuffle_and_batch(self._ds(), 0, 0)

    def test_stratified_split(self):
        ds = self._ds(30)
        train, test = D.stratified_split(ds, 0.2, seed=0)
        assert len(train) == 24 and len(test) == 6
        assert np.bincount(test.labels).tolist() == [2, 2, 2]
        assert set(train.ids).isdisjoint(test.ids)


class TestSynth:
    def test_deterministic(self):
        a, _ = D.synth_dataset(4, 5, 32, seed=3)
        b, _ = D.synth_dataset(4, 5, 32, seed=3)
        c, _ = D.synth_dataset(4, 5, 32, seed=4)
        assert np.array_equal(a.images, b.images)
        assert not np.array_equal(a.images, c.images)

    def test_shapes_and_ids(self):
        train, test = D.synth_dataset(4, 10, 32, seed=0, test_per_class=3)
        assert train.images.shape == (40, 3, 32, 32) and len(test) == 12
        assert np.bincount(train.labels).tolist() == [10] * 4
        assert set(train.ids).isdisjoint(test.ids)

    @pytest.mark.parametrize("n_classes", [2, 4, 5, 10])
    def test_dominant_intensity_in_class_band(self, n_classes):
        train, _ = D.synth_dataset(n_classes, 6, 32, seed=1)
        bands = make_bands(n_classes)
        for img, k in zip(normalize(train.images), train.labels):
            hist = [np.count_nonzero(b.contains(img)) for b in bands]
            assert int(np.argmax(hist)) == k

    def test_nearest_mean_intensity_classifier(self):
        train, test = D.synth_dataset(5, 20, 32, seed=2)
        mean_of = lambda ds: normalize(ds.images).reshape(len(ds), -1).mean(axis=1)
        centers = np.array([mean_of(train)[train.labels == k].mean() for k in range(5)])
        pred = np.argmin(np.abs(mean_of(test)[:, None] - centers[None]), axis=1)
        assert (pred == test.labels).mean() > 0.9

    def test_side_must_divide(self):
        with pytest.raises(ConfigError, match="divisible by 32"):
            D.synth_dataset(4, 2, 48)

    def test_too_many_classes(self):
        with pytest.raises(ConfigError, match="too few"):
            D.synth_dataset(100, 1, 32)


def test_dataset_rejects_bad_labels():
    with pytest.raises(FormatError):
        D.Dataset(np.zeros((2, 1, 2, 2), dtype=np.uint8), [0, 5], [0, 1], ("a", "b"))
