import gzip

import numpy as np
import pytest

from vflsim.data import (
    SERVER_ONLY,
    FormatError,
    LabelAccessError,
    PartitionError,
    TruncatedFile,
    VerticalDataset,
    build_mnist_model,
    gen_quadratic_testbed,
    load_mnist_idx,
    partition_quadrants,
    reassemble_quadrants,
    write_idx_images,
    write_idx_labels,
)


def checkerboard_images(n=3, side=4):
    # quadrant q of image i holds the constant 10*i + q
    images = np.zeros((n, side, side))
    h = side // 2
    for i in range(n):
        images[i, :h, :h] = 10 * i + 0
        images[i, :h, h:] = 10 * i + 1
        images[i, h:, :h] = 10 * i + 2
        images[i, h:, h:] = 10 * i + 3
    return images


def test_quadrant_partition_layout():
    images = checkerboard_images()
    ds = partition_quadrants(images, np.arange(3))
    assert ds.n_clients == 4
    for q, block in enumerate(ds.blocks):
        assert block.shape == (3, 4)
        np.testing.assert_array_equal(block, np.repeat(10 * np.arange(3) + q, 4).reshape(3, 4))


def test_quadrant_round_trip():
    rng = np.random.default_rng(0)
    images = rng.random((5, 6, 6))
    ds = partition_quadrants(images, np.zeros(5, dtype=int))
    np.testing.assert_array_equal(reassemble_quadrants(ds.blocks, 6), images)


@pytest.mark.parametrize("shape", [(3, 5, 5), (3, 4, 6), (3, 4)])
def test_partition_rejects_bad_images(shape):
    with pytest.raises(PartitionError):
        partition_quadrants(np.zeros(shape), np.zeros(3, dtype=int))


def test_dataset_row_count_mismatch():
    with pytest.raises(PartitionError):
        VerticalDataset([np.zeros((3, 2))], np.zeros(4, dtype=int))


def test_label_visibility_guard():
    ds = partition_quadrants(checkerboard_images(), np.arange(3), SERVER_ONLY)
    with pytest.raises(LabelAccessError):
        _ = ds.labels
    np.testing.assert_array_equal(ds.server_labels(), np.arange(3))


# ----------------------------------------------------------------- IDX format


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(7, 4, 4), dtype=np.uint8)
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    write_idx_images(tmp_path / "img", images)
    write_idx_labels(tmp_path / "lab", labels)
    loaded, y = load_mnist_idx(tmp_path / "img", tmp_path / "lab")
    np.testing.assert_allclose(loaded, images / 255.0)
    np.testing.assert_array_equal(y, labels)
    assert y.dtype == np.int64


def test_idx_gzip_transparent(tmp_path):
    images = np.arange(16, dtype=np.uint8).reshape(1, 4, 4)
    write_idx_images(tmp_path / "img", images)
    with open(tmp_path / "img", "rb") as f:
        payload = f.read()
    with gzip.open(tmp_path / "img.gz", "wb") as f:
        f.write(payload)
    write_idx_labels(tmp_path / "lab", np.array([3], dtype=np.uint8))
    loaded, y = load_mnist_idx(tmp_path / "img.gz", tmp_path / "lab")
    np.testing.assert_allclose(loaded, images / 255.0)


def test_idx_bad_magic(tmp_path):
    import struct

    with open(tmp_path / "img", "wb") as f:
        f.write(struct.pack(">iiii", 9999, 1, 4, 4))
        f.write(bytes(16))
    write_idx_labels(tmp_path / "lab", np.zeros(1, dtype=np.uint8))
    with pytest.raises(FormatError):
        load_mnist_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated(tmp_path):
    write_idx_images(tmp_path / "img", np.zeros((2, 4, 4), dtype=np.uint8))
    with open(tmp_path / "img", "rb") as f:
        data = f.read()
    with open(tmp_path / "short", "wb") as f:
        f.write(data[:-5])
    write_idx_labels(tmp_path / "lab", np.zeros(2, dtype=np.uint8))
    with pytest.raises(TruncatedFile):
        load_mnist_idx(tmp_path / "short", tmp_path / "lab")


def test_idx_count_mismatch(tmp_path):
    write_idx_images(tmp_path / "img", np.zeros((2, 4, 4), dtype=np.uint8))
    write_idx_labels(tmp_path / "lab", np.zeros(3, dtype=np.uint8))
    with pytest.raises(FormatError):
        load_mnist_idx(tmp_path / "img", tmp_path / "lab")


# ------------------------------------------------------------ synthetic testbed


def test_testbed_seed_determinism():
    a, pa = gen_quadratic_testbed(5, 10, 2, 3, 2)
    b, pb = gen_quadratic_testbed(5, 10, 2, 3, 2)
    c, _ = gen_quadratic_testbed(6, 10, 2, 3, 2)
    for x, y in zip(pa, pb):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a.fusion.targets, b.fusion.targets)
    assert not np.array_equal(a.fusion.targets, c.fusion.targets)


def test_testbed_scale_normalization():
    model, _ = gen_quadratic_testbed(0, 15, 3, 4, 3, scale=2.0)
    norms = [np.linalg.norm(m.mats[n], 2) for m in model.maps for n in range(15)]
    assert max(norms) == pytest.approx(2.0)


def test_testbed_heterogeneous_dims():
    model, planted = gen_quadratic_testbed(1, 8, 3, [2, 5, 3], 2)
    assert model.block_dims() == [2, 2, 5, 3]
    assert [p.size for p in planted] == [2, 2, 5, 3]
    with pytest.raises(PartitionError):
        gen_quadratic_testbed(1, 8, 3, [2, 5], 2)


def test_mnist_model_shapes():
    images = np.random.default_rng(2).random((6, 28, 28))
    ds = partition_quadrants(images, np.arange(6) % 10)
    model = build_mnist_model(ds, hidden_dim=16)
    assert model.block_dims() == [160] + [16 * 196] * 4
    blocks = model.init_state(np.random.default_rng(0))
    reps = model.representations(blocks, np.arange(6))
    assert all(r.shape == (6, 16) for r in reps)
    assert np.isfinite(model.loss(blocks, np.arange(6)))
