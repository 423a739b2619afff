import numpy as np
import pytest

from conftest import random_dataset
from freqrobust.dataio import (
    AugmentPolicy,
    DataFormatError,
    GridSpec,
    LabeledDataset,
    Manifest,
    augment_provenance,
    channel_stats,
    crop_flip,
    denormalize,
    encode_records,
    filter_dataset,
    generate_test_grid,
    load_cifar10,
    normalize,
    read_provenance,
    read_records,
    standard_augment,
    standard_augment_batch,
    stochastic_augment,
    write_provenance,
    write_records,
)
from freqrobust.imgfreq import FilterKind, FilterSpec, filter_highpass, filter_lowpass, to_display_u8


class TestRecords:
    def test_single_record(self, tmp_path):
        f = tmp_path / "test_batch.bin"
        f.write_bytes(bytes([3]) + bytes([255]) * 3072)
        ds = load_cifar10(tmp_path, "test")
        assert len(ds) == 1
        assert ds.labels.tolist() == [3]
        assert ds.images.shape == (1, 32, 32, 3)
        assert np.all(ds.images == 1.0)

    def test_channel_plane_layout(self, tmp_path):
        # red plane first, row-major
        raw = np.zeros(3073, dtype=np.uint8)
        raw[0] = 1
        raw[1 + 0 * 1024 + 2 * 32 + 5] = 10  # R at (2, 5)
        raw[1 + 1 * 1024 + 0 * 32 + 1] = 20  # G at (0, 1)
        raw[1 + 2 * 1024 + 31 * 32 + 31] = 30  # B at (31, 31)
        (tmp_path / "test_batch.bin").write_bytes(raw.tobytes())
        img = load_cifar10(tmp_path, "test").images[0]
        assert to_display_u8(img[2, 5, 0]) == 10
        assert to_display_u8(img[0, 1, 1]) == 20
        assert to_display_u8(img[31, 31, 2]) == 30
        assert np.count_nonzero(img) == 3

    def test_empty_file(self, tmp_path):
        (tmp_path / "test_batch.bin").write_bytes(b"")
        with pytest.raises(DataFormatError):
            load_cifar10(tmp_path, "test")

    def test_bad_length(self, tmp_path):
        (tmp_path / "test_batch.bin").write_bytes(bytes(3074))
        with pytest.raises(DataFormatError):
            load_cifar10(tmp_path, "test")

    def test_bad_label(self, tmp_path):
        (tmp_path / "test_batch.bin").write_bytes(bytes([10]) + bytes(3072))
        with pytest.raises(DataFormatError):
            load_cifar10(tmp_path, "test")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cifar10(tmp_path, "train")

    def test_train_concatenates_in_order(self, tmp_path):
        for i in range(1, 6):
            (tmp_path / f"data_batch_{i}.bin").write_bytes(
                bytes([i]) + bytes(3072) + bytes([i + 4]) + bytes(3072)
            )
        ds = load_cifar10(tmp_path, "train")
        assert ds.labels.tolist() == [1, 5, 2, 6, 3, 7, 4, 8, 5, 9]

    def test_round_trip_quantized(self, tmp_path):
        ds = random_dataset(12, seed=1)
        write_records(tmp_path / "x.bin", ds)
        back = read_records(tmp_path / "x.bin")
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(to_display_u8(back.images), to_display_u8(ds.images))
        # a second trip is lossless
        write_records(tmp_path / "y.bin", back)
        assert (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()

    def test_round_trip_signed_per_item(self, tmp_path):
        ds = random_dataset(6, seed=2)
        ds.images[::2] -= 0.5
        mask = np.array([True, False] * 3)
        write_records(tmp_path / "x.bin", ds, signed=mask)
        back = read_records(tmp_path / "x.bin", signed=mask)
        np.testing.assert_allclose(back.images, ds.images, atol=1 / 255 + 1e-6)

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 32, 32, 3)), [0, 10], 10)
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 32, 32, 3)), [0], 10)


class TestGrid:
    def test_default_grid(self):
        cells = GridSpec().cells()
        assert len(cells) == 36
        assert sum(c.kind is FilterKind.HIGH for c in cells) == 18
        assert len(set(cells)) == 36

    def test_generate(self, tmp_path, small_ds):
        m = generate_test_grid(small_ds, GridSpec(), tmp_path / "grid")
        assert len(m.cells) == 36
        assert len({e.spec.label for e in m.cells}) == 36
        back = Manifest.read(tmp_path / "grid" / "manifest.ini")
        assert [e.spec for e in back.cells] == [e.spec for e in m.cells]
        assert back.clean.count == len(small_ds)
        for e in back.cells:
            assert e.count == len(small_ds)
            assert e.encoding == ("signed" if e.spec.kind is FilterKind.HIGH else "unsigned")
            ds = back.load(e)
            assert np.array_equal(ds.labels, small_ds.labels)

    def test_cell_content(self, tmp_path, small_ds):
        m = generate_test_grid(small_ds, GridSpec(sigmas=[0.5], widths=[2]), tmp_path)
        low = [e for e in m.cells if e.spec.kind is FilterKind.LOW][0]
        high = [e for e in m.cells if e.spec.kind is FilterKind.HIGH][0]
        src = small_ds.images[0].astype(np.float64)
        assert np.array_equal(
            to_display_u8(m.load(low).images[0]), to_display_u8(filter_lowpass(src, 0.5, 2))
        )
        assert np.array_equal(
            to_display_u8(m.load(high).images[0], signed=True),
            to_display_u8(filter_highpass(src, 0.5, 2), signed=True),
        )
        in_mem = filter_dataset(small_ds, FilterSpec("low", 0.5, 2))
        np.testing.assert_allclose(in_mem.images[0], filter_lowpass(src, 0.5, 2), atol=1e-6)

    def test_thread_count_irrelevant(self, tmp_path, small_ds):
        grid = GridSpec(sigmas=[1.0], widths=[3, 5])
        generate_test_grid(small_ds, grid, tmp_path / "a", threads=1)
        generate_test_grid(small_ds, grid, tmp_path / "b", threads=4)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_unwritable(self, tmp_path, small_ds):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_test_grid(small_ds, GridSpec(), blocker / "sub")


class TestStochasticAugment:
    def test_doubles(self, small_ds):
        aug = stochastic_augment(small_ds, AugmentPolicy(seed=3))
        n = len(small_ds)
        assert len(aug) == 2 * n
        assert np.array_equal(aug.images[:n], small_ds.images)
        assert np.array_equal(aug.labels[n:], small_ds.labels)

    def test_copy_matches_draw(self, small_ds):
        policy = AugmentPolicy(seed=5)
        aug = stochastic_augment(small_ds, policy)
        for i in (0, 7, 19):
            spec = policy.draw(i)
            expected = filter_highpass if spec.kind is FilterKind.HIGH else filter_lowpass
            ref = expected(small_ds.images[i].astype(np.float64), spec.sigma, spec.width)
            assert np.array_equal(aug.images[len(small_ds) + i], ref.astype(np.float32))

    def test_deterministic_and_parallel_invariant(self, small_ds):
        a = stochastic_augment(small_ds, AugmentPolicy(seed=9), threads=1)
        b = stochastic_augment(small_ds, AugmentPolicy(seed=9), threads=3)
        assert np.array_equal(a.images, b.images)
        c = stochastic_augment(small_ds, AugmentPolicy(seed=10))
        assert not np.array_equal(a.images, c.images)

    def test_draw_is_order_independent(self):
        p = AugmentPolicy(seed=11)
        forward = [p.draw(i) for i in range(50)]
        backward = [p.draw(i) for i in reversed(range(50))][::-1]
        assert forward == backward

    def test_draw_statistics(self):
        p = AugmentPolicy(seed=2024)
        draws = [p.draw(i) for i in range(10_000)]
        high = np.mean([d.kind is FilterKind.HIGH for d in draws])
        assert 0.47 <= high <= 0.53
        sigmas = np.array([d.sigma for d in draws])
        assert sigmas.min() >= 0.25 and sigmas.max() <= 1.75
        assert {d.width for d in draws} == {2, 3, 4, 5, 6, 7}

    @pytest.mark.parametrize(
        "kwargs", [dict(sigma_min=1.0, sigma_max=0.5), dict(sigma_min=0.0), dict(width_choices=[])]
    )
    def test_invalid_policy(self, kwargs):
        with pytest.raises(ValueError):
            AugmentPolicy(**kwargs)

    def test_provenance_round_trip(self, tmp_path):
        p = AugmentPolicy(seed=1)
        recs = augment_provenance(25, p)
        write_provenance(tmp_path / "prov.csv", recs, offset=25)
        assert read_provenance(tmp_path / "prov.csv") == recs
        first = (tmp_path / "prov.csv").read_text().splitlines()[1].split(",")
        assert first[:2] == ["25", "0"]


class TestStandardAugment:
    def test_center_crop_identity(self):
        img = np.random.default_rng(0).random((32, 32, 3))
        assert np.array_equal(crop_flip(img, 4, 4, False), img)

    def test_flip_involution(self):
        img = np.random.default_rng(1).random((32, 32, 3))
        once = crop_flip(img, 2, 6, True)
        assert np.array_equal(once[:, ::-1], crop_flip(img, 2, 6, False))

    def test_replicate_border(self):
        img = np.random.default_rng(2).random((32, 32, 3))
        out = crop_flip(img, 0, 0, False)
        assert np.array_equal(out[:4, :4], np.broadcast_to(img[0, 0], (4, 4, 3)))

    def test_reproducible(self):
        img = np.random.default_rng(3).random((32, 32, 3))
        a = standard_augment(img, np.random.default_rng(7))
        b = standard_augment(img, np.random.default_rng(7))
        assert np.array_equal(a, b)
        assert a.shape == img.shape

    def test_batch_matches_single(self):
        imgs = np.random.default_rng(4).random((5, 32, 32, 3))
        r1, r2 = np.random.default_rng(8), np.random.default_rng(8)
        batch = standard_augment_batch(imgs, r1)
        singles = np.stack([standard_augment(im, r2) for im in imgs])
        assert np.array_equal(batch, singles)


class TestNormalize:
    def test_identity(self):
        img = np.random.default_rng(0).random((4, 4, 3))
        assert np.array_equal(normalize(img, [0, 0, 0], [1, 1, 1]), img)

    def test_constant(self):
        img = np.full((4, 4, 3), 0.5)
        np.testing.assert_array_equal(normalize(img, [0.5] * 3, [0.25] * 3), 0.0)

    def test_inverse(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 6, 3))
        mean, std = rng.random(3), rng.random(3) + 0.1
        np.testing.assert_allclose(normalize(denormalize(x, mean, std), mean, std), x, atol=1e-12)

    @pytest.mark.parametrize("std", [[1, 0, 1], [1, -1, 1]])
    def test_bad_std(self, std):
        with pytest.raises(ValueError):
            normalize(np.zeros((2, 2, 3)), [0, 0, 0], std)

    def test_channel_stats(self, small_ds):
        mean, std = channel_stats(small_ds)
        z = normalize(small_ds.images.astype(np.float64), mean, std)
        np.testing.assert_allclose(z.mean(axis=(0, 1, 2)), 0, atol=1e-9)
        np.testing.assert_allclose(z.std(axis=(0, 1, 2)), 1, atol=1e-9)


def test_synthetic_loads(synthetic_root):
    tr = load_cifar10(synthetic_root, "train")
    te = load_cifar10(synthetic_root, "test")
    assert (len(tr), len(te)) == (500, 100)
    assert set(te.labels.tolist()) == set(range(10))


def test_encode_rejects_shape():
    with pytest.raises(ValueError):
        encode_records(np.zeros(1, int), np.zeros((1, 16, 16, 3)))
