"""Image-pair IO, sliding-window cropping, rotation/mirror augmentation,
a deterministic synthetic change-pair generator and dataset manifests."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import rng_stream

MASK_THRESHOLD = 128
MANIFEST_HEADER = "# hpcfnet-manifest v1"
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Bad input files, crop/augment parameters or manifest content."""


@dataclass
class ImagePair:
    """Two (3, H, W) images in [0, 1] and an optional (H, W) uint8 change map."""

    t0: np.ndarray
    t1: np.ndarray
    mask: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        if self.t0.shape != self.t1.shape:
            raise DataError(f"{self.id}: image shapes differ {self.t0.shape} vs {self.t1.shape}")
        if self.mask is not None and self.mask.shape != self.t0.shape[1:]:
            raise DataError(f"{self.id}: mask {self.mask.shape} vs images {self.t0.shape[1:]}")

    @property
    def size(self) -> tuple[int, int]:
        return self.t0.shape[1], self.t0.shape[2]


@dataclass
class ManifestRecord:
    id: str
    path_t0: str
    path_t1: str
    path_mask: str
    split: str = "train"


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    seed: int | None = None
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def __len__(self) -> int:
        return len(self.records)


# -- image IO ----------------------------------------------------------------

def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= MASK_THRESHOLD).astype(np.uint8)


def write_rgb(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_image_pair(record: ManifestRecord, root=".") -> ImagePair:
    root = Path(root)
    paths = [root / record.path_t0, root / record.path_t1]
    if record.path_mask:
        paths.append(root / record.path_mask)
    for p in paths:
        if not p.is_file():
            raise DataError(f"{record.id}: missing file {p}")
    t0, t1 = read_rgb(paths[0]), read_rgb(paths[1])
    mask = read_mask(paths[2]) if record.path_mask else None
    if t0.shape != t1.shape or (mask is not None and mask.shape != t0.shape[1:]):
        raise DataError(f"{record.id}: dimension mismatch between t0 {t0.shape[1:]}, "
                        f"t1 {t1.shape[1:]} and mask {None if mask is None else mask.shape}")
    return ImagePair(t0, t1, mask, record.id)


def save_image_pair(pair: ImagePair, directory) -> ManifestRecord:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rec = ManifestRecord(pair.id, f"{pair.id}_t0.png", f"{pair.id}_t1.png",
                         f"{pair.id}_mask.png" if pair.mask is not None else "")
    write_rgb(directory / rec.path_t0, pair.t0)
    write_rgb(directory / rec.path_t1, pair.t1)
    if pair.mask is not None:
        write_mask(directory / rec.path_mask, pair.mask)
    return rec


def load_split(manifest: DatasetManifest, split: str) -> list[ImagePair]:
    return [load_image_pair(r, manifest.root) for r in manifest.split(split)]


def stack_batch(pairs: list[ImagePair], dtype=np.float32):
    """(n, 3, H, W) arrays for t0 and t1 plus (n, H, W) labels (or None)."""
    t0 = np.stack([p.t0 for p in pairs]).astype(dtype)
    t1 = np.stack([p.t1 for p in pairs]).astype(dtype)
    labels = None
    if all(p.mask is not None for p in pairs):
        labels = np.stack([p.mask for p in pairs]).astype(np.int64)
    return t0, t1, labels


# -- preprocessing -----------------------------------------------------------

def crop_offsets(extent: int, patch: int, stride: int) -> list[int]:
    return list(range(0, extent - patch + 1, stride))


def sliding_crop(pair: ImagePair, patch=(224, 224), stride: int = 56) -> list[ImagePair]:
    """Window crops at offsets 0, s, 2s, ... that fit entirely in the image."""
    ph, pw = patch
    H, W = pair.size
    if stride < 1:
        raise DataError("stride must be >= 1")
    if ph > H or pw > W or ph < 1 or pw < 1:
        raise DataError(f"patch {patch} does not fit image {(H, W)}")
    out = []
    for oy in crop_offsets(H, ph, stride):
        for ox in crop_offsets(W, pw, stride):
            sl = (slice(oy, oy + ph), slice(ox, ox + pw))
            out.append(ImagePair(pair.t0[:, sl[0], sl[1]].copy(), pair.t1[:, sl[0], sl[1]].copy(),
                                 None if pair.mask is None else pair.mask[sl].copy(),
                                 f"{pair.id}_y{oy}_x{ox}"))
    return out


def transform(arr: np.ndarray, k: int, mirror: bool) -> np.ndarray:
    """Rotate the last two axes by k*90 degrees (counter-clockwise), then mirror left-right."""
    out = np.rot90(arr, k, axes=(-2, -1))
    if mirror:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def invert_transform(arr: np.ndarray, k: int, mirror: bool) -> np.ndarray:
    out = arr[..., ::-1] if mirror else arr
    return np.ascontiguousarray(np.rot90(out, -k, axes=(-2, -1)))


def augment(pair: ImagePair) -> list[ImagePair]:
    """The 8 right-angle rotations x {identity, mirror}, first one is the original."""
    H, W = pair.size
    if H != W:
        raise DataError(f"{pair.id}: rotation augmentation needs square patches, got {(H, W)}")
    out = []
    for k in range(4):
        for mirror in (False, True):
            out.append(ImagePair(transform(pair.t0, k, mirror), transform(pair.t1, k, mirror),
                                 None if pair.mask is None else transform(pair.mask, k, mirror),
                                 f"{pair.id}_r{90 * k}{'m' if mirror else ''}"))
    return out


# -- manifest IO ---------------------------------------------------------------

def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [MANIFEST_HEADER + (f" seed={manifest.seed}" if manifest.seed is not None else "")]
    for r in manifest.records:
        lines.append("\t".join([r.id, r.path_t0, r.path_t1, r.path_mask, r.split]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    manifest = DatasetManifest(root=path.parent)
    seen: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for tok in line.split():
                if tok.startswith("seed="):
                    manifest.seed = int(tok[5:])
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        rec = ManifestRecord(*fields)
        if not rec.id or not rec.path_t0 or not rec.path_t1:
            raise DataError(f"{path}:{lineno}: missing field")
        if rec.split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {rec.split!r}")
        if rec.id in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {rec.id!r} (first on line {seen[rec.id]})")
        seen[rec.id] = lineno
        manifest.records.append(rec)
    return manifest


# -- synthetic change pairs ---------------------------------------------------

@dataclass
class SynthKnobs:
    min_changes: int = 2
    max_changes: int = 3
    static_objects: int = 1
    min_extent: float = 0.20
    max_extent: float = 0.45
    noise: float = 0.03
    sensor_noise: float = 0.01
    jitter: float = 0.10
    val_fraction: float = 0.0

    @classmethod
    def no_objects(cls) -> "SynthKnobs":
        return cls(min_changes=0, max_changes=0, static_objects=0)


def rasterize(shape: dict, H: int, W: int) -> np.ndarray:
    """Boolean support of a rectangle or ellipse spec."""
    yy, xx = np.mgrid[0:H, 0:W]
    if shape["kind"] == "rect":
        return (yy >= shape["y0"]) & (yy < shape["y1"]) & (xx >= shape["x0"]) & (xx < shape["x1"])
    cy, cx = (shape["y0"] + shape["y1"]) / 2, (shape["x0"] + shape["x1"]) / 2
    ry, rx = (shape["y1"] - shape["y0"]) / 2, (shape["x1"] - shape["x0"]) / 2
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def _place_shapes(rng: np.random.Generator, count: int, H: int, W: int, knobs: SynthKnobs,
                  taken: list[tuple[int, int, int, int]]) -> list[dict]:
    shapes = []
    for _ in range(count):
        for _attempt in range(100):
            h = int(rng.integers(max(2, int(knobs.min_extent * H)), max(3, int(knobs.max_extent * H)) + 1))
            w = int(rng.integers(max(2, int(knobs.min_extent * W)), max(3, int(knobs.max_extent * W)) + 1))
            y0 = int(rng.integers(0, H - h + 1))
            x0 = int(rng.integers(0, W - w + 1))
            box = (y0, x0, y0 + h, x0 + w)
            if all(box[2] + 1 <= t[0] or t[2] + 1 <= box[0] or box[3] + 1 <= t[1] or t[3] + 1 <= box[1]
                   for t in taken):
                taken.append(box)
                shapes.append({"kind": "rect" if rng.random() < 0.5 else "ellipse",
                               "y0": y0, "x0": x0, "y1": y0 + h, "x1": x0 + w,
                               "color": [float(v) for v in rng.uniform(0, 1, 3)]})
                break
    return shapes


def _paint(img: np.ndarray, shapes: list[dict]) -> None:
    H, W = img.shape[1:]
    for s in shapes:
        sup = rasterize(s, H, W)
        img[:, sup] = np.asarray(s["color"])[:, None]


def synth_pair(seed: int, index: int, size=(64, 64), knobs: SynthKnobs | None = None):
    """One synthetic pair and the shape specs behind it."""
    knobs = knobs or SynthKnobs()
    H, W = size
    rng = rng_stream(seed, f"synth/{index}")
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    base = rng.uniform(0.2, 0.8, 3)
    gy, gx = rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.3, 0.3, 3)
    bg = base[:, None, None] + gy[:, None, None] * yy + gx[:, None, None] * xx
    bg = bg + knobs.noise * rng.standard_normal((3, H, W))

    taken: list = []
    static = _place_shapes(rng, knobs.static_objects, H, W, knobs, taken)
    n_change = int(rng.integers(knobs.min_changes, knobs.max_changes + 1)) if knobs.max_changes else 0
    changes = _place_shapes(rng, n_change, H, W, knobs, taken)
    in_t0 = [bool(rng.random() < 0.5) for _ in changes]
    only0 = [s for s, a in zip(changes, in_t0) if a]
    only1 = [s for s, a in zip(changes, in_t0) if not a]

    t0, t1 = bg.copy(), bg.copy()
    _paint(t0, static + only0)
    _paint(t1, static + only1)
    t0 = t0 + knobs.sensor_noise * rng.standard_normal((3, H, W))
    t1 = t1 + knobs.sensor_noise * rng.standard_normal((3, H, W))
    t1 = t1 * (1.0 + rng.uniform(-knobs.jitter, knobs.jitter))
    sup0 = np.zeros((H, W), bool)
    sup1 = np.zeros((H, W), bool)
    for s in static + only0:
        sup0 |= rasterize(s, H, W)
    for s in static + only1:
        sup1 |= rasterize(s, H, W)
    mask = (sup0 ^ sup1).astype(np.uint8)
    pair = ImagePair(np.clip(t0, 0, 1), np.clip(t1, 0, 1), mask, f"pair{index:05d}")
    return pair, {"static": static, "t0_only": only0, "t1_only": only1}


def synth_dataset(out_dir, seed: int, count: int, size=(64, 64),
                  knobs: SynthKnobs | None = None) -> DatasetManifest:
    """Render ``count`` pairs plus ``manifest.tsv`` and ``shapes.json`` into ``out_dir``."""
    H, W = size
    if H % 16 or W % 16 or H < 16 or W < 16:
        raise DataError(f"size {size} must be divisible by 16")
    knobs = knobs or SynthKnobs()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_val = int(round(count * knobs.val_fraction))
    manifest = DatasetManifest(seed=seed, root=out_dir)
    specs = {}
    for i in range(count):
        pair, shapes = synth_pair(seed, i, size, knobs)
        rec = save_image_pair(pair, out_dir)
        rec.split = "val" if i >= count - n_val else "train"
        manifest.records.append(rec)
        specs[pair.id] = shapes
    write_manifest(manifest, out_dir / "manifest.tsv")
    (out_dir / "shapes.json").write_text(json.dumps(specs, sort_keys=True, indent=1), encoding="utf-8")
    return manifest


def default_output_dir() -> Path:
    return Path(os.environ.get("HPCFNET_OUT", "runs"))
