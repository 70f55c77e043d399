import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstsd.data import (
    SPIRAL_TURNS,
    LabeledDataset,
    augment_epoch,
    augment_pad_crop_flip,
    batches,
    gen_spiral,
    load_cifar_binary,
    load_idx,
    shuffle_epoch,
    stream,
)
from lstsd.errors import FormatError, ValidationError


class TestSpiral:
    def test_counts(self):
        ds = gen_spiral(100, 3, 0.1, seed=0)
        assert len(ds) == 300
        assert np.bincount(ds.labels).tolist() == [100, 100, 100]
        assert ds.features.shape == (300, 2)

    def test_noise_free_points_on_their_arm(self):
        ds = gen_spiral(200, 3, 0.0, seed=7)
        r = np.hypot(ds.features[:, 0], ds.features[:, 1])
        theta = np.arctan2(ds.features[:, 1], ds.features[:, 0])
        # radius is the arm parameter; the angle it implies must match modulo 2 pi
        expected = 2 * math.pi * ds.labels / 3 + 2 * math.pi * SPIRAL_TURNS * r
        residual = np.angle(np.exp(1j * (theta - expected)))
        mask = r > 1e-6
        assert np.abs(residual[mask]).max() < 1e-9
        assert ((r >= 0) & (r <= 1)).all()

    def test_deterministic(self):
        a, b = gen_spiral(50, 3, 0.05, 11), gen_spiral(50, 3, 0.05, 11)
        np.testing.assert_array_equal(a.features, b.features)
        assert not np.array_equal(a.features, gen_spiral(50, 3, 0.05, 12).features)

    @pytest.mark.parametrize("args", [(0, 3, 0.1), (10, 1, 0.1), (10, 3, -1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValidationError):
            gen_spiral(*args, seed=0)


class TestLabeledDataset:
    def test_label_out_of_range(self):
        with pytest.raises(ValidationError, match="sample 1"):
            LabeledDataset(np.zeros((2, 2)), [0, 3], 3)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            LabeledDataset(np.zeros((3, 2)), [0, 1], 2)

    def test_csv(self, tmp_path):
        LabeledDataset([[0.5, -1.0]], [1], 2).to_csv(tmp_path / "d.csv")
        assert (tmp_path / "d.csv").read_text() == "0.5,-1.0,1\n"


def cifar_record(label, pixels, fine=None):
    head = bytes([label]) if fine is None else bytes([label, fine])
    return head + bytes(int(p) for p in pixels)


class TestCifar:
    def test_two_records(self, tmp_path):
        px0 = np.arange(3072) % 256
        px1 = np.full(3072, 255)
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(cifar_record(3, px0) + cifar_record(9, px1))
        ds = load_cifar_binary(path)
        assert len(ds) == 2
        assert ds.labels.tolist() == [3, 9]
        assert ds.features.shape == (2, 3, 32, 32)
        np.testing.assert_allclose(ds.features[0].ravel(), px0 / 255.0)
        np.testing.assert_array_equal(ds.features[1], 1.0)

    def test_cifar100_uses_fine_label(self, tmp_path):
        path = tmp_path / "train.bin"
        path.write_bytes(cifar_record(4, [0] * 3072, fine=77))
        ds = load_cifar_binary(path, "cifar100")
        assert ds.labels.tolist() == [77]
        assert ds.num_classes == 100

    def test_normalization(self, tmp_path):
        path = tmp_path / "b.bin"
        path.write_bytes(cifar_record(0, [255] * 3072))
        ds = load_cifar_binary(path, mean=(0.5, 0.5, 0.5), std=(0.25, 0.5, 1.0))
        assert ds.features[0, :, 0, 0].tolist() == [2.0, 1.0, 0.5]

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.bin"
        path.write_bytes(cifar_record(1, [0] * 3072)[:1536])
        with pytest.raises(FormatError, match="1536 bytes"):
            load_cifar_binary(path)


def idx_bytes(type_code, dims, payload):
    head = bytes([0, 0, type_code, len(dims)]) + b"".join(d.to_bytes(4, "big") for d in dims)
    return head + payload


class TestIdx:
    def test_images_become_single_channel(self, tmp_path):
        imgs = np.arange(32, dtype=np.uint8)
        (tmp_path / "img").write_bytes(idx_bytes(0x08, (2, 4, 4), imgs.tobytes()))
        (tmp_path / "lab").write_bytes(idx_bytes(0x08, (2,), bytes([1, 0])))
        ds = load_idx(tmp_path / "img", tmp_path / "lab", num_classes=10)
        assert ds.features.shape == (2, 1, 4, 4)
        assert ds.labels.tolist() == [1, 0]
        np.testing.assert_allclose(ds.features[1, 0].ravel(), np.arange(16, 32) / 255.0)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "img").write_bytes(b"\x12\x34\x08\x03" + bytes(12))
        (tmp_path / "lab").write_bytes(idx_bytes(0x08, (1,), b"\x00"))
        with pytest.raises(FormatError, match="magic"):
            load_idx(tmp_path / "img", tmp_path / "lab")

    def test_short_payload(self, tmp_path):
        (tmp_path / "img").write_bytes(idx_bytes(0x08, (2, 4, 4), bytes(20)))
        (tmp_path / "lab").write_bytes(idx_bytes(0x08, (2,), bytes(2)))
        with pytest.raises(FormatError, match="20 bytes"):
            load_idx(tmp_path / "img", tmp_path / "lab")


class TestShuffle:
    def test_single(self):
        assert shuffle_epoch(1, 0, 0).permutation.tolist() == [0]

    def test_deterministic(self):
        a, b = shuffle_epoch(100, 5, 3), shuffle_epoch(100, 5, 3)
        np.testing.assert_array_equal(a.permutation, b.permutation)

    def test_epochs_differ(self):
        assert not np.array_equal(shuffle_epoch(100, 5, 0).permutation, shuffle_epoch(100, 5, 1).permutation)

    def test_bijection_over_seeds(self):
        identity = np.arange(52)
        moved = 0
        for seed in range(100):
            perm = shuffle_epoch(52, seed, 0).permutation
            assert sorted(perm.tolist()) == identity.tolist()
            moved += not np.array_equal(perm, identity)
        assert moved >= 99

    def test_fisher_yates_replay(self):
        rng = stream(4, 2, 9)
        perm = list(range(6))
        for i in range(5, 0, -1):
            j = int(rng.integers(0, i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        assert shuffle_epoch(6, 4, 9).permutation.tolist() == perm

    def test_positions_roughly_uniform(self):
        counts = np.zeros((4, 4))
        for seed in range(4000):
            perm = shuffle_epoch(4, seed, 0).permutation
            counts[np.arange(4), perm] += 1
        assert np.abs(counts / 4000 - 0.25).max() < 0.03


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batches(shuffle_epoch(5, 0, 0), 2)] == [2, 2, 1]

    def test_single_batch(self):
        out = list(batches(shuffle_epoch(4, 0, 0), 4))
        assert len(out) == 1 and sorted(out[0].tolist()) == [0, 1, 2, 3]

    def test_covers_every_id_once(self):
        order = shuffle_epoch(17, 3, 1)
        assert np.concatenate(list(batches(order, 5))).tolist() == order.permutation.tolist()

    def test_bad_size(self):
        with pytest.raises(ValidationError):
            list(batches(shuffle_epoch(3, 0, 0), 0))


class TestAugment:
    def test_identity(self):
        img = np.random.default_rng(0).normal(size=(3, 5, 5))
        np.testing.assert_array_equal(augment_pad_crop_flip(img, 0, 0.0, stream(0, 3)), img)

    def test_crop_origin_covers_81_positions_uniformly(self):
        img = (np.arange(32 * 32, dtype=float) + 1).reshape(1, 32, 32)
        rng = stream(1, 3)
        seen = {}
        for _ in range(8100):
            out = augment_pad_crop_flip(img, 4, 0.0, rng)[0]
            i, j = np.argwhere(out > 0)[0]
            r, c = divmod(int(out[i, j]) - 1, 32)
            origin = (r - i + 4, c - j + 4)
            seen[origin] = seen.get(origin, 0) + 1
        assert set(seen) == {(a, b) for a in range(9) for b in range(9)}
        assert min(seen.values()) > 50 and max(seen.values()) < 155

    def test_flip_involution(self):
        img = np.random.default_rng(1).normal(size=(2, 6, 6))
        plain = augment_pad_crop_flip(img, 2, 0.0, stream(7, 3))
        flipped = augment_pad_crop_flip(img, 2, 1.0, stream(7, 3))
        np.testing.assert_array_equal(flipped[:, :, ::-1], plain)

    def test_epoch_view_deterministic(self):
        feats = np.random.default_rng(2).normal(size=(4, 1, 6, 6))
        np.testing.assert_array_equal(augment_epoch(feats, 2, 0.5, 0, 3), augment_epoch(feats, 2, 0.5, 0, 3))
        assert augment_epoch(feats, 2, 0.5, 0, 3).shape == feats.shape

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 3), st.integers(0, 2**32))
    def test_shape_preserved(self, pad, seed):
        img = np.ones((3, 5, 7))
        assert augment_pad_crop_flip(img, pad, 0.5, stream(seed, 3)).shape == img.shape
