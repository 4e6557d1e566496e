"""PPM codec, patch transforms, and procedural generator tests."""

import numpy as np
import pytest

from vqkit.data import (
    LabeledDataset,
    encode_ppm,
    gen_shapes,
    gen_vectors,
    heldout_mask,
    load_dataset,
    load_ppm,
    patchify,
    save_dataset,
    save_ppm,
    unpatchify,
)
from vqkit.errors import FormatError, ShapeError

RNG = np.random.default_rng(5)


class TestPPM:
    def test_all_black(self, tmp_path):
        path = tmp_path / "black.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
        img = load_ppm(path)
        assert img.shape == (2, 2, 3)
        assert np.array_equal(img, np.zeros((2, 2, 3), dtype=np.float32))

    def test_pixel_arithmetic(self, tmp_path):
        path = tmp_path / "px.ppm"
        path.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 128, 0]))
        img = load_ppm(path)
        assert img[0, 0, 0] == 1.0
        assert abs(img[0, 0, 1] - 128 / 255) < 1e-7
        assert img[0, 0, 2] == 0.0

    def test_save_load_round_trip_bytes(self, tmp_path):
        raw = RNG.integers(0, 256, size=(8, 6, 3), dtype=np.uint8)
        path = tmp_path / "rt.ppm"
        path.write_bytes(b"P6\n6 8\n255\n" + raw.tobytes())
        img = load_ppm(path)
        out = tmp_path / "rt2.ppm"
        save_ppm(img, out)
        assert out.read_bytes() == path.read_bytes()

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n1 1\n255\n" + bytes(3))
        assert load_ppm(path).shape == (1, 1, 3)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n1 1\n255\n" + bytes(3))
        with pytest.raises(FormatError, match="magic"):
            load_ppm(path)

    def test_wrong_maxval(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(FormatError, match="maxval"):
            load_ppm(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(FormatError, match="byte"):
            load_ppm(path)

    def test_range_check_on_save(self):
        with pytest.raises(ShapeError):
            encode_ppm(np.full((2, 2, 3), 1.5, dtype=np.float32))


class TestPatchify:
    def test_token_arithmetic(self):
        img = RNG.random((32, 32, 3)).astype(np.float32)
        tokens = patchify(img, 8)
        assert tokens.shape == (16, 192)  # (32/8)^2 tokens of 3*8*8

    def test_round_trip_exact(self):
        img = RNG.random((32, 32, 3)).astype(np.float32)
        assert np.array_equal(unpatchify(patchify(img, 8), 32, 32, 8), img)
        batch = RNG.random((5, 16, 16, 3)).astype(np.float32)
        assert np.array_equal(unpatchify(patchify(batch, 4), 16, 16, 4), batch)

    def test_first_patch_is_topleft_crop_channel_last(self):
        img = np.zeros((16, 16, 3), dtype=np.float32)
        img[:, :, 0] = np.linspace(0, 1, 16)[None, :]
        img[:, :, 1] = np.linspace(0, 1, 16)[:, None]
        tokens = patchify(img, 8)
        assert np.array_equal(tokens[0], img[:8, :8, :].reshape(-1))

    def test_row_major_patch_order(self):
        img = np.zeros((16, 16, 3), dtype=np.float32)
        img[0:8, 8:16] = 1.0  # top-right patch
        tokens = patchify(img, 8)
        assert tokens[1].max() == 1.0 and tokens[2].max() == 0.0

    def test_divisibility(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((30, 30, 3), dtype=np.float32), 8)


class TestGenShapes:
    def test_deterministic(self):
        a = gen_shapes(4, 64, num_classes=8)
        b = gen_shapes(4, 64, num_classes=8)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)
        assert gen_shapes(5, 64).images.tobytes() != a.images.tobytes()

    def test_class_histogram_uniform(self):
        ds = gen_shapes(0, 10_000, num_classes=8)
        counts = np.bincount(ds.labels, minlength=8)
        assert (abs(counts / 10_000 - 0.125) <= 0.02 * 1.0).all()

    def test_values_on_8bit_grid(self):
        ds = gen_shapes(1, 16)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert np.allclose(ds.images * 255, np.round(ds.images * 255), atol=1e-4)

    def test_class_count_bounds(self):
        with pytest.raises(ShapeError):
            gen_shapes(0, 8, num_classes=1)
        with pytest.raises(ShapeError):
            gen_shapes(0, 8, num_classes=17)

    def test_linear_probe_learnable(self):
        # ridge probe on raw pixels: the task is learnable (>= 60%) but not trivial
        train = gen_shapes(2, 4000, num_classes=8)
        test = gen_shapes(3, 500, num_classes=8)
        x = train.images.reshape(len(train), -1).astype(np.float64)
        x = np.hstack([x, np.ones((len(train), 1))])
        y = np.eye(8)[train.labels]
        w = np.linalg.solve(x.T @ x + 10.0 * np.eye(x.shape[1]), x.T @ y)
        xt = test.images.reshape(len(test), -1).astype(np.float64)
        xt = np.hstack([xt, np.ones((len(test), 1))])
        acc = ((xt @ w).argmax(axis=1) == test.labels).mean()
        assert acc >= 0.60


class TestGenVectors:
    def test_deterministic(self):
        assert gen_vectors(1, 100, 8).tobytes() == gen_vectors(1, 100, 8).tobytes()

    def test_isotropic_mean_norm(self):
        x = gen_vectors(0, 50_000, 64).astype(np.float64)
        mean_sq = (x**2).sum(axis=1).mean()
        assert abs(mean_sq - 64) / 64 < 0.03

    def test_mixture_separability(self):
        from vqkit.quantize import fit_kmeans

        x = gen_vectors(7, 2000, 8, components=4)
        _, h4 = fit_kmeans(x, 4, seed=0, return_history=True)
        _, h1 = fit_kmeans(x, 1, seed=0, return_history=True)
        assert h4[-1] < 0.5 * h1[-1]


class TestDatasetIO:
    def test_save_load_round_trip(self, tmp_path):
        ds = gen_shapes(9, 24, num_classes=4)
        out = tmp_path / "ds"
        save_dataset(ds, out)
        back = load_dataset(out)
        assert back.images.tobytes() == ds.images.tobytes()  # 8-bit grid images
        assert np.array_equal(back.labels, ds.labels)
        assert back.class_names == ds.class_names

    def test_missing_referenced_file(self, tmp_path):
        ds = gen_shapes(9, 4, num_classes=4)
        out = tmp_path / "ds"
        save_dataset(ds, out)
        (out / ds.names[2]).unlink()
        with pytest.raises(FormatError, match="does not exist"):
            load_dataset(out)

    def test_labels_header_checked(self, tmp_path):
        out = tmp_path / "ds"
        out.mkdir()
        (out / "labels.csv").write_text("file,cls\n")
        with pytest.raises(FormatError, match="header"):
            load_dataset(out)

    def test_dense_class_ids_enforced(self):
        with pytest.raises(ShapeError):
            LabeledDataset(
                images=np.zeros((1, 4, 4, 3), dtype=np.float32),
                labels=np.array([5]),
                names=["a.ppm"],
                class_names=["x", "y"],
            )


class TestHeldoutMask:
    def test_deterministic_and_reasonable_fraction(self):
        m1 = heldout_mask(5000)
        m2 = heldout_mask(5000)
        assert np.array_equal(m1, m2)
        frac = m1.mean()
        assert 0.07 < frac < 0.13
        # prefix stability: the split of item i never depends on dataset size
        assert np.array_equal(heldout_mask(100), m1[:100])
