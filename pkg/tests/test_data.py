import filecmp
import math
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bussam import data
from bussam.data import (
    CropFlip,
    SamplePair,
    apply_augment,
    augment,
    augment_params,
    encode_pgm,
    load_pgm,
    parse_pgm,
    preprocess,
    read_labels,
    read_manifest,
    resize_nearest,
    save_pgm,
    split_dataset,
    synth_dataset,
    write_manifest,
)
from bussam.errors import DataError, PgmFormatError

FIX = Path(__file__).parent / "fixtures"


class TestPgm:
    def test_one_pixel(self):
        assert load_pgm(FIX / "one_pixel.pgm").tolist() == [[1.0]]

    def test_known_fixture(self):
        expect = np.array([[0, 51, 102], [153, 204, 255]]) / 255.0
        np.testing.assert_array_equal(load_pgm(FIX / "known_2x3.pgm"), expect)

    def test_roundtrip_bytes(self, tmp_path):
        a = np.random.default_rng(0).integers(0, 256, (16, 16), dtype=np.uint8)
        save_pgm(a, tmp_path / "a.pgm")
        back = load_pgm(tmp_path / "a.pgm")
        assert np.array_equal(np.rint(back * 255).astype(np.uint8), a)
        save_pgm(back, tmp_path / "b.pgm")
        assert filecmp.cmp(tmp_path / "a.pgm", tmp_path / "b.pgm", shallow=False)

    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**16))
    def test_roundtrip_property(self, h, w, seed):
        a = np.random.default_rng(seed).integers(0, 256, (h, w), dtype=np.uint8)
        assert encode_pgm(parse_pgm(encode_pgm(a))) == encode_pgm(a)

    @pytest.mark.parametrize(
        "name,offset,text",
        [("bad_magic.pgm", 0, "bad magic"), ("truncated.pgm", 21, "truncated"), ("maxval_65535.pgm", 7, "maxval 65535")],
    )
    def test_malformed_fixtures(self, name, offset, text):
        with pytest.raises(PgmFormatError) as exc:
            load_pgm(FIX / name)
        assert exc.value.offset == offset
        assert text in str(exc.value) and f"byte offset {offset}" in str(exc.value)
        assert exc.value.exit_code == 2

    def test_header_errors(self):
        with pytest.raises(PgmFormatError, match="truncated header"):
            parse_pgm(b"P5\n3 ")
        with pytest.raises(PgmFormatError, match="integer"):
            parse_pgm(b"P5\nx 2 255\n")
        with pytest.raises(PgmFormatError, match="dimensions"):
            parse_pgm(b"P5\n0 2 255\n")
        with pytest.raises(DataError):
            load_pgm(FIX / "missing.pgm")


def _bilinear_point(img, y, x):
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, img.shape[0] - 1), min(x0 + 1, img.shape[1] - 1)
    fy, fx = y - y0, x - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


class TestPreprocess:
    def test_busi_sized_input(self):
        rng = np.random.default_rng(1)
        img = rng.random((500, 500))
        mask = np.zeros((500, 500), np.uint8)
        mask[100:300, 150:420] = 1
        out = preprocess(SamplePair(img, mask, "x"), 256)
        assert out.image.shape == out.mask.shape == (256, 256)
        assert set(np.unique(out.mask)) <= {0, 1}
        # resize oracle sampled pointwise, then the same standardisation
        s = 499 / 255
        ref = np.array([[_bilinear_point(img, i * s, j * s) for j in range(256)] for i in range(256)])
        ref = (ref - ref.mean()) / ref.std()
        np.testing.assert_allclose(out.image, ref, atol=1e-5)
        for i, j in [(0, 0), (51, 77), (128, 200), (255, 255)]:
            assert out.mask[i, j] == mask[int(math.floor(i * s + 0.5)), int(math.floor(j * s + 0.5))]

    def test_same_size_only_standardised(self):
        img = np.random.default_rng(2).random((32, 32))
        out = preprocess(SamplePair(img, np.zeros((32, 32), np.uint8)), 32)
        np.testing.assert_allclose(out.image, (img - img.mean()) / img.std(), atol=1e-6)
        assert abs(float(out.image.mean())) < 1e-6 and abs(float(out.image.std()) - 1) < 1e-5

    def test_constant_image(self):
        out = preprocess(SamplePair(np.full((8, 8), 0.4), np.zeros((8, 8), np.uint8)), 16)
        assert np.all(out.image == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            SamplePair(np.zeros((4, 4)), np.zeros((4, 5)))


def _pair(seed, size=24):
    rng = np.random.default_rng(seed)
    mask = (rng.random((size, size)) > 0.7).astype(np.uint8)
    return SamplePair(rng.random((size, size)), mask, f"p{seed}")


class TestAugment:
    def test_deterministic(self):
        p = _pair(0)
        a, b = augment(p, 7), augment(p, 7)
        assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()

    def test_forced_flip_involution(self):
        p = _pair(1)
        t = CropFlip(0, 0, 24, 24, True)
        twice = apply_augment(apply_augment(p, t), t)
        np.testing.assert_array_equal(twice.image, p.image)
        np.testing.assert_array_equal(twice.mask, p.mask)

    @given(st.integers(0, 2**20))
    def test_crop_scale_and_label_provenance(self, seed):
        p = _pair(seed % 97)
        t = augment_params(p.image.shape, seed)
        assert 0.8 * 24 - 1 <= t.height <= 24 and t.height == t.width
        out = apply_augment(p, t)
        assert set(np.unique(out.mask)) <= {0, 1}
        window = p.mask[t.top:t.top + t.height, t.left:t.left + t.width]
        assert window.sum() <= p.mask.sum()
        # every output positive comes from a positive source pixel of the window
        ys = data._nearest_index(t.height, 24)
        xs = data._nearest_index(t.width, 24)
        src = window[np.ix_(ys, xs)]
        if t.flip:
            src = src[:, ::-1]
        np.testing.assert_array_equal(out.mask, src)

    def test_flip_rate_near_half(self):
        flips = [augment_params((10, 10), s).flip for s in range(2000)]
        assert 0.45 < np.mean(flips) < 0.55

    def test_same_geometry_for_image_and_mask(self):
        img = np.zeros((16, 16))
        img[4:9, 2:7] = 1.0
        p = SamplePair(img, (img > 0.5).astype(np.uint8))
        out = augment(p, 3, flip=True)
        assert np.array_equal(out.mask, (out.image > 0.5).astype(np.uint8))


class TestSplit:
    def test_two_classes(self):
        labels = {f"b{i}": "benign" for i in range(10)} | {f"m{i}": "malignant" for i in range(10)}
        train, test = split_dataset(labels, seed=0)
        assert sum(labels[i] == "benign" for i in train) == 8 and sum(labels[i] == "malignant" for i in train) == 8
        assert sum(labels[i] == "benign" for i in test) == 2 and sum(labels[i] == "malignant" for i in test) == 2

    def test_five_single_class(self):
        train, test = split_dataset({f"s{i}": "lesion" for i in range(5)}, seed=1)
        assert (len(train), len(test)) == (4, 1)

    @given(st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=60), st.integers(0, 1000))
    def test_partition_property(self, classes, seed):
        labels = {f"id{i}": c for i, c in enumerate(classes)}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            train, test = split_dataset(labels, seed=seed)
            again = split_dataset(labels, seed=seed)
        assert (train, test) == again
        assert not set(train) & set(test)
        assert set(train) | set(test) == set(labels)
        for c in set(classes):
            n = classes.count(c)
            assert sum(labels[i] == c for i in test) == math.floor(n * 0.2 + 0.5)

    def test_small_class_warns(self):
        with pytest.warns(UserWarning, match="best-effort"):
            split_dataset({"a": "x", "b": "x", "c": "y", "d": "y", "e": "y", "f": "y", "g": "y"})

    def test_manifest_roundtrip(self, tmp_path):
        path = write_manifest(tmp_path, ["a", "b"], ["c"])
        assert path.read_text() == "train a\ntrain b\ntest c\n"
        assert read_manifest(tmp_path) == (["a", "b"], ["c"])
        path.write_text("valid a\n")
        with pytest.raises(DataError):
            read_manifest(tmp_path)
        with pytest.raises(DataError, match="split"):
            read_manifest(tmp_path / "nowhere")


class TestSynth:
    def test_deterministic_corpus(self, tmp_path):
        synth_dataset(4, 24, 9, tmp_path / "a")
        synth_dataset(4, 24, 9, tmp_path / "b")
        for sub in ("images", "masks"):
            for f in (tmp_path / "a" / sub).iterdir():
                assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
        assert (tmp_path / "a" / "labels.txt").read_text() == (tmp_path / "b" / "labels.txt").read_text()

    def test_corpus_statistics(self, tmp_path):
        ids = synth_dataset(60, 48, 2, tmp_path)
        darker = 0
        for sid in ids:
            p = data.load_pair(tmp_path, sid)
            assert p.mask.any() and p.mask.shape == (48, 48)
            # lesion never touches the border
            assert not (p.mask[0].any() or p.mask[-1].any() or p.mask[:, 0].any() or p.mask[:, -1].any())
            darker += p.image[p.mask == 1].mean() < p.image[p.mask == 0].mean()
        assert darker >= 0.95 * len(ids)
        assert read_labels(tmp_path) == {sid: "lesion" for sid in ids}

    def test_bad_count_and_dir(self, tmp_path):
        with pytest.raises(DataError):
            synth_dataset(0, 16, 0, tmp_path)
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(DataError):
            synth_dataset(1, 16, 0, blocker / "sub")

    def test_labels_default_without_file(self, tmp_path):
        synth_dataset(3, 16, 0, tmp_path)
        (tmp_path / "labels.txt").unlink()
        assert set(read_labels(tmp_path).values()) == {"lesion"}
        (tmp_path / "labels.txt").write_text("case0000\n")
        with pytest.raises(DataError):
            read_labels(tmp_path)


def test_resize_nearest_preserves_binary():
    m = (np.random.default_rng(4).random((13, 17)) > 0.5).astype(np.uint8)
    out = resize_nearest(m, 40, 9)
    assert out.shape == (40, 9) and set(np.unique(out)) <= {0, 1}
