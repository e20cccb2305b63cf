import json

import numpy as np
import pytest
from PIL import Image

from hpcfnet.data import (DataError, DatasetManifest, ImagePair, ManifestRecord, SynthKnobs, augment,
                          invert_transform, load_image_pair, read_manifest, save_image_pair,
                          sliding_crop, synth_dataset, transform, write_manifest)


def random_pair(rng, h, w, pid="p"):
    return ImagePair(rng.random((3, h, w)), rng.random((3, h, w)),
                     (rng.random((h, w)) > 0.5).astype(np.uint8), pid)


class TestLoad:
    def _write(self, tmp_path, t0, t1, mask):
        Image.fromarray(t0, "RGB").save(tmp_path / "a.png")
        Image.fromarray(t1, "RGB").save(tmp_path / "b.png")
        Image.fromarray(mask, "L").save(tmp_path / "m.png")
        return ManifestRecord("x", "a.png", "b.png", "m.png")

    def test_threshold_and_scale(self, tmp_path):
        img = np.zeros((2, 3, 3), np.uint8)
        img[0, 0] = 255
        mask = np.array([[127, 128, 0], [255, 0, 129]], np.uint8)
        pair = load_image_pair(self._write(tmp_path, img, img, mask), tmp_path)
        assert pair.t0[:, 0, 0].tolist() == [1.0, 1.0, 1.0]
        assert pair.t0[0, 1, 1] == 0.0
        assert pair.mask.tolist() == [[0, 1, 0], [1, 0, 1]]

    def test_black_mask(self, tmp_path):
        img = np.full((4, 4, 3), 77, np.uint8)
        pair = load_image_pair(self._write(tmp_path, img, img, np.zeros((4, 4), np.uint8)), tmp_path)
        assert pair.mask.dtype == np.uint8 and not pair.mask.any()

    def test_missing_file_names_id(self, tmp_path):
        with pytest.raises(DataError, match="gone"):
            load_image_pair(ManifestRecord("gone", "a.png", "b.png", "m.png"), tmp_path)

    def test_dimension_mismatch(self, tmp_path):
        img = np.zeros((4, 4, 3), np.uint8)
        rec = self._write(tmp_path, img, img, np.zeros((4, 5), np.uint8))
        with pytest.raises(DataError, match="x"):
            load_image_pair(rec, tmp_path)

    def test_load_save_load_idempotent(self, tmp_path, rng):
        img0 = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
        img1 = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
        mask = rng.integers(0, 256, (8, 8)).astype(np.uint8)
        first = load_image_pair(self._write(tmp_path, img0, img1, mask), tmp_path)
        rec = save_image_pair(first, tmp_path / "again")
        second = load_image_pair(rec, tmp_path / "again")
        assert np.array_equal(first.t0, second.t0) and np.array_equal(first.t1, second.t1)
        assert np.array_equal(first.mask, second.mask)


class TestSlidingCrop:
    def test_fifteen_patches(self):
        pair = ImagePair(np.zeros((3, 224, 1024)), np.zeros((3, 224, 1024)), np.zeros((224, 1024), np.uint8))
        crops = sliding_crop(pair, (224, 224), 56)
        assert len(crops) == 15
        assert crops[-1].id.endswith("_y0_x784")

    def test_whole_image(self, rng):
        pair = random_pair(rng, 16, 20)
        (crop,) = sliding_crop(pair, (16, 20), 5)
        assert np.array_equal(crop.t0, pair.t0) and np.array_equal(crop.mask, pair.mask)

    def test_width_300(self, rng):
        crops = sliding_crop(random_pair(rng, 4, 300), (4, 224), 56)
        assert [c.id.split("_x")[1] for c in crops] == ["0", "56"]

    def test_mask_cropped_with_images(self, rng):
        pair = random_pair(rng, 10, 12)
        for c in sliding_crop(pair, (4, 5), 3):
            oy, ox = (int(v) for v in c.id.split("_y")[1].split("_x"))
            assert np.array_equal(c.mask, pair.mask[oy:oy + 4, ox:ox + 5])
            assert np.array_equal(c.t1, pair.t1[:, oy:oy + 4, ox:ox + 5])

    def test_count_formula_vs_enumeration(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            W = int(rng.integers(1, 400))
            pw = int(rng.integers(1, W + 1))
            s = int(rng.integers(1, 80))
            enumerated = [o for o in range(W) if o % s == 0 and o + pw <= W]
            pair = ImagePair(np.zeros((3, 1, W)), np.zeros((3, 1, W)))
            crops = sliding_crop(pair, (1, pw), s)
            assert len(crops) == len(enumerated) == (W - pw) // s + 1

    @pytest.mark.parametrize("patch,stride", [((5, 4), 1), ((4, 9), 1), ((4, 4), 0)])
    def test_errors(self, rng, patch, stride):
        with pytest.raises(DataError):
            sliding_crop(random_pair(rng, 4, 8), patch, stride)


class TestAugment:
    def test_count_and_original(self, rng):
        pair = random_pair(rng, 6, 6)
        out = augment(pair)
        assert len(out) == 8
        assert np.array_equal(out[0].t0, pair.t0) and np.array_equal(out[0].mask, pair.mask)
        assert len({o.mask.tobytes() for o in augment(random_pair(rng, 5, 5))}) == 8

    def test_dataset_arithmetic(self):
        pair = ImagePair(np.zeros((3, 224, 1024)), np.zeros((3, 224, 1024)))
        per_image = sum(len(augment(c)) for c in sliding_crop(pair, (224, 224), 56))
        assert 200 * per_image == 24000

    def test_mirror_involution(self, rng):
        a = rng.random((3, 5, 5))
        assert np.array_equal(transform(transform(a, 0, True), 0, True), a)

    def test_inverse_realigns(self, rng):
        pair = random_pair(rng, 7, 7)
        for k in range(4):
            for mirror in (False, True):
                assert np.array_equal(invert_transform(transform(pair.mask, k, mirror), k, mirror), pair.mask)

    def test_coordinate_probe(self):
        n = 5
        y, x = 1, 3
        t0 = np.zeros((3, n, n))
        t0[0, y, x] = 1
        t1 = np.zeros((3, n, n))
        t1[2, y, x] = 1
        mask = np.zeros((n, n), np.uint8)
        mask[y, x] = 1
        for i, out in enumerate(augment(ImagePair(t0, t1, mask))):
            k, mirror = divmod(i, 2)
            where = [np.argwhere(a)[0][-2:].tolist() for a in (out.t0, out.t1, out.mask)]
            assert where[0] == where[1] == where[2]
            # counter-clockwise quarter turn maps (y, x) -> (n - 1 - x, y)
            py, px = y, x
            for _ in range(k):
                py, px = n - 1 - px, py
            if mirror:
                px = n - 1 - px
            assert where[0] == [py, px]

    def test_non_square(self, rng):
        with pytest.raises(DataError):
            augment(random_pair(rng, 4, 6))


def rasterize_oracle(shape, H, W):
    """Per-pixel membership by pixel centre, written without numpy broadcasting."""
    cells = set()
    for i in range(H):
        for j in range(W):
            if shape["kind"] == "rect":
                inside = shape["y0"] <= i < shape["y1"] and shape["x0"] <= j < shape["x1"]
            else:
                cy = (shape["y0"] + shape["y1"]) / 2
                cx = (shape["x0"] + shape["x1"]) / 2
                ry = (shape["y1"] - shape["y0"]) / 2
                rx = (shape["x1"] - shape["x0"]) / 2
                inside = ((i + 0.5 - cy) / ry) ** 2 + ((j + 0.5 - cx) / rx) ** 2 <= 1.0
            if inside:
                cells.add((i, j))
    return cells


class TestSynth:
    def test_byte_identical(self, tmp_path):
        synth_dataset(tmp_path / "a", seed=5, count=3, size=(32, 32))
        synth_dataset(tmp_path / "b", seed=5, count=3, size=(32, 32))
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len(files) == 3 * 3 + 2
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_content(self, tmp_path):
        synth_dataset(tmp_path / "a", seed=5, count=1, size=(32, 32))
        synth_dataset(tmp_path / "b", seed=6, count=1, size=(32, 32))
        assert (tmp_path / "a/pair00000_t0.png").read_bytes() != (tmp_path / "b/pair00000_t0.png").read_bytes()

    def test_no_objects(self, tmp_path):
        m = synth_dataset(tmp_path, seed=1, count=4, size=(16, 32), knobs=SynthKnobs.no_objects())
        for rec in m.records:
            assert not load_image_pair(rec, tmp_path).mask.any()

    def test_mask_is_symmetric_difference(self, tmp_path):
        m = synth_dataset(tmp_path, seed=11, count=6, size=(32, 48))
        specs = json.loads((tmp_path / "shapes.json").read_text())
        for rec in m.records:
            s = specs[rec.id]
            sup0, sup1 = set(), set()
            for shape in s["static"] + s["t0_only"]:
                sup0 |= rasterize_oracle(shape, 32, 48)
            for shape in s["static"] + s["t1_only"]:
                sup1 |= rasterize_oracle(shape, 32, 48)
            xor = sup0 ^ sup1
            mask = load_image_pair(rec, tmp_path).mask
            assert set(map(tuple, np.argwhere(mask).tolist())) == xor
            assert len(s["t0_only"]) + len(s["t1_only"]) >= 1

    def test_val_split(self, tmp_path):
        m = synth_dataset(tmp_path, seed=1, count=10, size=(16, 16), knobs=SynthKnobs(val_fraction=0.2))
        assert [r.split for r in m.records].count("val") == 2

    def test_indivisible_size(self, tmp_path):
        with pytest.raises(DataError):
            synth_dataset(tmp_path, seed=1, count=1, size=(60, 60))


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = DatasetManifest([ManifestRecord(f"id{i}", f"{i}a.png", f"{i}b.png", f"{i}m.png",
                                            ["train", "val", "test"][i % 3]) for i in range(5)], seed=3)
        write_manifest(m, tmp_path / "m.tsv")
        back = read_manifest(tmp_path / "m.tsv")
        assert back.records == m.records and back.seed == 3 and back.root == tmp_path

    def test_duplicate_line_number(self, tmp_path):
        lines = ["# hpcfnet-manifest v1"] + [f"id{i}\ta\tb\tm\ttrain" for i in range(5)] + ["id2\ta\tb\tm\ttrain"]
        (tmp_path / "m.tsv").write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match=r":7: duplicate id 'id2'"):
            read_manifest(tmp_path / "m.tsv")

    def test_missing_field(self, tmp_path):
        (tmp_path / "m.tsv").write_text("id\ta\tb\ttrain\n")
        with pytest.raises(DataError, match=":1:"):
            read_manifest(tmp_path / "m.tsv")

    def test_unknown_split(self, tmp_path):
        (tmp_path / "m.tsv").write_text("# h\nid\ta\tb\tm\tholdout\n")
        with pytest.raises(DataError, match=":2:"):
            read_manifest(tmp_path / "m.tsv")

    def test_empty_file(self, tmp_path):
        (tmp_path / "m.tsv").write_text("")
        assert len(read_manifest(tmp_path / "m.tsv")) == 0
