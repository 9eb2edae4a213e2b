import os
import sys

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
from haze import generate_pairs
from pairs import DatasetError
from readers.dataset_reader import (
    SyntheticSpec,
    assign_splits,
    make_dataset,
    read_directory,
    split_counts,
    write_dataset,
)
from readers.image_read import ImageFormatError, ImageTruncatedError, load_image, save_image


@pytest.fixture
def rng():
    return np.random.default_rng(17)


class TestImageRead:

    @pytest.mark.parametrize("ext", [".png", ".ppm"])
    def test_round_trip_within_half_a_level(self, rng, tmp_path, ext):
        image = rng.uniform(size=(3, 9, 13))
        path = str(tmp_path / f"img{ext}")
        save_image(image, path)
        loaded = load_image(path)
        assert loaded.shape == (3, 9, 13)
        assert loaded.dtype == np.float32
        assert np.max(np.abs(loaded - image)) <= 1 / 510 + 1e-6

    def test_black_image(self, tmp_path):
        path = str(tmp_path / "black.png")
        save_image(np.zeros((3, 4, 4)), path)
        np.testing.assert_array_equal(load_image(path), np.zeros((3, 4, 4)))

    def test_out_of_range_values_are_clamped(self, tmp_path):
        path = str(tmp_path / "clamp.png")
        save_image(np.full((3, 2, 2), 1.7), path)
        np.testing.assert_array_equal(load_image(path), np.ones((3, 2, 2)))

    def test_ppm_bytes(self, tmp_path):
        path = tmp_path / "tiny.ppm"
        pixels = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153])
        path.write_bytes(b"P6\n2 2\n255\n" + pixels)
        image = load_image(str(path))
        expected = np.array(pixels, dtype=np.float32).reshape(2, 2, 3).transpose(2, 0, 1) / 255
        np.testing.assert_allclose(image, expected, rtol=1e-7)
        assert image[:, 1, 1].tolist() == pytest.approx([0.2, 0.4, 0.6])

    def test_grayscale_is_expanded(self, tmp_path):
        path = str(tmp_path / "gray.png")
        Image.fromarray(np.full((3, 5), 128, dtype=np.uint8)).save(path)
        image = load_image(path)
        assert image.shape == (3, 3, 5)
        np.testing.assert_allclose(image, 128 / 255, rtol=1e-6)

    def test_truncated_file(self, rng, tmp_path):
        path = tmp_path / "cut.png"
        save_image(rng.uniform(size=(3, 48, 48)), str(path))
        data = path.read_bytes()
        path.write_bytes(data[:len(data) * 3 // 5])
        with pytest.raises(ImageTruncatedError):
            load_image(str(path))

    def test_unsupported_extension(self, tmp_path):
        with pytest.raises(ImageFormatError):
            load_image(str(tmp_path / "photo.jpg"))

    def test_wrong_contents(self, tmp_path):
        path = tmp_path / "fake.png"
        path.write_bytes(b"definitely not an image")
        with pytest.raises(ImageFormatError):
            load_image(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(str(tmp_path / "absent.png"))


class TestSplits:

    def test_statehaze_counts(self):
        assert split_counts(400) == (320, 35, 45)

    def test_rshaze_counts(self):
        assert split_counts(54000, "rshaze") == (51300, 0, 2700)

    def test_explicit_fractions(self):
        assert split_counts(10, (0.5, 0.2, 0.3)) == (5, 2, 3)

    @pytest.mark.parametrize("split", ["bogus", (0.5, 0.5, 0.5), (1.0, 0.0)])
    def test_bad_split(self, split):
        with pytest.raises(DatasetError):
            split_counts(10, split)

    def test_assignment_is_seeded(self):
        assert assign_splits(50, seed=3) == assign_splits(50, seed=3)
        assert assign_splits(50, seed=3) != assign_splits(50, seed=4)


class TestDataset:

    def test_synthetic_split(self):
        dataset = make_dataset(SyntheticSpec(count=400, size=(8, 8), seed=1))
        assert len(dataset) == 400
        assert dataset.counts() == {"train": 320, "val": 35, "test": 45}
        assert len(dataset.pairs("val")) == 35

    def test_split_is_deterministic(self):
        spec = SyntheticSpec(count=40, size=(8, 8), seed=1)
        assert make_dataset(spec, seed=2).ids("test") == make_dataset(spec, seed=2).ids("test")

    def test_directory_round_trip(self, tmp_path):
        pairs = generate_pairs(5, (12, 12), seed=0)
        write_dataset(pairs, str(tmp_path))
        dataset = make_dataset(str(tmp_path), split="train")
        assert dataset.ids() == [p.id for p in pairs]
        loaded = dataset.pairs()
        assert loaded[0].provenance.kind == "file"
        assert np.max(np.abs(loaded[0].clean - pairs[0].clean)) <= 1 / 510 + 1e-6

    def test_unmatched_file_is_named(self, tmp_path):
        write_dataset(generate_pairs(2, (8, 8), seed=0), str(tmp_path))
        save_image(np.zeros((3, 8, 8)), str(tmp_path / "hazy" / "orphan.png"))
        with pytest.raises(DatasetError, match="orphan.png"):
            read_directory(str(tmp_path))

    def test_missing_directory_is_named(self, tmp_path):
        missing = str(tmp_path / "nowhere")
        with pytest.raises(DatasetError, match="nowhere"):
            make_dataset(missing)

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "hazy").mkdir()
        (tmp_path / "clean").mkdir()
        with pytest.raises(DatasetError, match="empty"):
            read_directory(str(tmp_path))

    def test_empty_synthetic(self):
        with pytest.raises(DatasetError):
            make_dataset(SyntheticSpec(count=0))
