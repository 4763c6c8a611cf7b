import numpy as np
import pytest

from vitlite.data import SHAPES, DatasetSpec, load_split, synth_dataset

SPEC = DatasetSpec(image_size=16, train_size=40, test_size=12, num_classes=4, seed=2)


def test_regeneration_is_bit_identical():
    a = load_split(SPEC, "train")
    b = load_split(SPEC, "train")
    assert a.images.tobytes() == b.images.tobytes()
    img, label = synth_dataset(SPEC, 7, "train")
    assert img.tobytes() == a.images[7].tobytes() and label == a.labels[7]


def test_splits_and_seeds_differ():
    tr, te = load_split(SPEC, "train"), load_split(SPEC, "test")
    assert not np.array_equal(tr.images[:12], te.images)
    other = load_split(DatasetSpec(**{**SPEC.to_dict(), "seed": 3}), "train")
    assert not np.array_equal(tr.images, other.images)


def test_range_shape_and_balance():
    data = load_split(SPEC, "train")
    assert data.images.shape == (40, 3, 16, 16) and data.images.dtype == np.float32
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0
    counts = np.bincount(data.labels, minlength=4)
    assert counts.max() - counts.min() <= 1
    uneven = load_split(DatasetSpec(**{**SPEC.to_dict(), "train_size": 10}), "train")
    c = np.bincount(uneven.labels, minlength=4)
    assert c.max() - c.min() <= 1


def test_prefix_is_stable_across_split_sizes():
    small = load_split(DatasetSpec(**{**SPEC.to_dict(), "train_size": 8}), "train")
    np.testing.assert_array_equal(small.images, load_split(SPEC, "train").images[:8])


def test_out_of_range_index():
    with pytest.raises(IndexError):
        synth_dataset(SPEC, 40, "train")
    with pytest.raises(IndexError):
        synth_dataset(SPEC, -1, "test")


def test_grayscale_and_violations():
    gray = load_split(DatasetSpec(**{**SPEC.to_dict(), "channels": 1, "train_size": 4}), "train")
    assert gray.images.shape == (4, 1, 16, 16)
    bad = DatasetSpec(num_classes=len(SHAPES) + 1, channels=2, image_size=2).violations()
    assert {p for p, _ in bad} == {"num_classes", "channels", "image_size"}
    assert DatasetSpec(kind="image-folder").violations()[0][0] == "root"


def test_image_folder(tmp_path):
    pil = pytest.importorskip("PIL.Image")
    for split in ("train", "test"):
        for cls in ("cat", "dog"):
            d = tmp_path / split / cls
            d.mkdir(parents=True)
            for i in range(3):
                arr = np.full((8, 8, 3), 40 * i + (100 if cls == "dog" else 0), np.uint8)
                pil.fromarray(arr).save(d / f"{i}.png")
    spec = DatasetSpec(kind="image-folder", root=str(tmp_path), image_size=8, train_size=4,
                       test_size=0)
    tr = load_split(spec, "train")
    assert tr.images.shape == (4, 3, 8, 8)
    # truncation keeps both classes
    assert sorted(tr.labels.tolist()) == [0, 0, 1, 1]
    assert len(load_split(spec, "test")) == 6
