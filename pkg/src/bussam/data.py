"""Image/mask I/O, preprocessing, augmentation, splitting and synthetic data.

On disk a dataset directory looks like::

    images/<id>.pgm     grayscale, 8-bit
    masks/<id>.pgm      0 = background, 255 = lesion
    labels.txt          "<id> <class>" per line (optional)
    split.manifest      "train <id>" / "test <id>" per line
"""
from __future__ import annotations

import logging
import math
import re
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from bussam.errors import DataError, PgmFormatError
from bussam.ops import interp_matrix

log = logging.getLogger(__name__)

_TOKEN = re.compile(rb"\S+")


@dataclass
class SamplePair:
    image: np.ndarray
    mask: np.ndarray
    id: str = ""
    spacing_mm: float = 1.0

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


# --------------------------------------------------------------------------
# PGM


def parse_pgm(buf: bytes) -> np.ndarray:
    """Decode a binary (P5) 8-bit PGM into a float array in [0, 1]."""
    if buf[:2] != b"P5":
        raise PgmFormatError(f"bad magic {buf[:2]!r}, expected b'P5'", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                nl = buf.find(b"\n", pos)
                pos = len(buf) if nl < 0 else nl + 1
            else:
                pos += 1
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise PgmFormatError("truncated header", pos)
        tok = m.group()
        if b"#" in tok:
            tok = tok.split(b"#", 1)[0]
        if not tok.isdigit():
            raise PgmFormatError(f"expected an integer header field, got {tok[:16]!r}", pos)
        fields.append((int(tok), pos))
        pos += len(tok)
    (width, wpos), (height, hpos), (maxval, mpos) = fields
    if width < 1 or height < 1:
        raise PgmFormatError(f"invalid dimensions {width}x{height}", wpos if width < 1 else hpos)
    if maxval != 255:
        raise PgmFormatError(f"unsupported maxval {maxval}, only 255 is accepted", mpos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PgmFormatError("missing whitespace before pixel data", pos)
    pos += 1
    need = width * height
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise PgmFormatError(f"truncated payload: expected {need} bytes, found {len(payload)}", pos + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return arr.astype(np.float64) / 255.0


def load_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        return parse_pgm(buf)
    except PgmFormatError as exc:
        raise PgmFormatError(f"{path}: {exc.args[0].rsplit(' (at byte', 1)[0]}", exc.offset) from None


def encode_pgm(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.ndim != 2:
        raise DataError(f"PGM needs a 2-D array, got shape {a.shape}")
    if a.dtype != np.uint8:
        a = np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode() + a.tobytes()


def save_pgm(array: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_pgm(array))


# --------------------------------------------------------------------------
# resizing


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D array (same kernel as the model)."""
    img = np.asarray(img, dtype=np.float64)
    return interp_matrix(img.shape[0], out_h) @ img @ interp_matrix(img.shape[1], out_w).T


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    """Source index nearest to the corner-aligned coordinate used by :func:`resize_bilinear`."""
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.intp)
    i = np.arange(n_out)
    return (2 * i * (n_in - 1) + (n_out - 1)) // (2 * (n_out - 1))


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    mask = np.asarray(mask)
    return mask[np.ix_(_nearest_index(mask.shape[0], out_h), _nearest_index(mask.shape[1], out_w))]


def standardize(img: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Zero mean, unit variance; images with spread below ``eps`` map to zeros."""
    img = np.asarray(img, dtype=np.float64)
    sd = float(img.std())
    if sd < eps:
        return np.zeros_like(img)
    return (img - img.mean()) / sd


def preprocess(pair: SamplePair, target: int) -> SamplePair:
    """Resize to ``target x target`` and standardise the image per sample."""
    img, mask = pair.image, pair.mask
    if img.shape != (target, target):
        img = resize_bilinear(img, target, target)
        mask = resize_nearest(mask, target, target)
    return replace(
        pair,
        image=standardize(img).astype(np.float32),
        mask=(np.asarray(mask) > 0).astype(np.uint8),
    )


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class CropFlip:
    top: int
    left: int
    height: int
    width: int
    flip: bool


def augment_params(shape: tuple[int, int], seed, scale_range=(0.8, 1.0), flip: bool | None = None) -> CropFlip:
    rng = np.random.default_rng(seed)
    h, w = shape
    s = rng.uniform(*scale_range)
    ch, cw = max(1, int(round(s * h))), max(1, int(round(s * w)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    do_flip = bool(rng.random() < 0.5)
    return CropFlip(top, left, ch, cw, do_flip if flip is None else flip)


def apply_augment(pair: SamplePair, t: CropFlip) -> SamplePair:
    h, w = pair.image.shape
    sl = (slice(t.top, t.top + t.height), slice(t.left, t.left + t.width))
    img = resize_bilinear(pair.image[sl], h, w)
    mask = resize_nearest(pair.mask[sl], h, w)
    if t.flip:
        img, mask = img[:, ::-1], mask[:, ::-1]
    return replace(pair, image=np.ascontiguousarray(img), mask=np.ascontiguousarray(mask))


def augment(pair: SamplePair, seed, flip: bool | None = None) -> SamplePair:
    """Random crop (scale 0.8-1.0, resized back) and horizontal flip (p=0.5)."""
    return apply_augment(pair, augment_params(pair.image.shape, seed, flip=flip))


# --------------------------------------------------------------------------
# splitting


def split_dataset(labels: dict[str, str], seed: int = 0, test_ratio: float = 0.2) -> tuple[list[str], list[str]]:
    """Per-class 4:1 train/test split, deterministic under ``seed``."""
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = {}
    for sid, cls in labels.items():
        by_class.setdefault(cls, []).append(sid)
    train, test = [], []
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        if len(ids) < 5:
            warnings.warn(f"class {cls!r} has only {len(ids)} samples; split is best-effort", stacklevel=2)
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_test = int(math.floor(len(ids) * test_ratio + 0.5))
        test.extend(order[:n_test])
        train.extend(order[n_test:])
    return sorted(train), sorted(test)


def read_labels(data_dir: str | Path) -> dict[str, str]:
    data_dir = Path(data_dir)
    lab = data_dir / "labels.txt"
    if lab.exists():
        out = {}
        for lineno, line in enumerate(lab.read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise DataError(f"{lab}:{lineno}: expected '<id> <class>'")
            out[parts[0]] = parts[1]
        return out
    ids = sorted(p.stem for p in (data_dir / "images").glob("*.pgm"))
    if not ids:
        raise DataError(f"no images found under {data_dir / 'images'}")
    return {i: "lesion" for i in ids}


def write_manifest(data_dir: str | Path, train: list[str], test: list[str]) -> Path:
    path = Path(data_dir) / "split.manifest"
    lines = [f"train {i}" for i in train] + [f"test {i}" for i in test]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(data_dir: str | Path) -> tuple[list[str], list[str]]:
    path = Path(data_dir) / "split.manifest"
    if not path.exists():
        raise DataError(f"missing split manifest {path}; run the split command first")
    train, test = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2 or parts[0] not in ("train", "test"):
            raise DataError(f"{path}:{lineno}: expected 'train <id>' or 'test <id>'")
        (train if parts[0] == "train" else test).append(parts[1])
    return train, test


def load_pair(data_dir: str | Path, sid: str, spacing_mm: float = 1.0) -> SamplePair:
    data_dir = Path(data_dir)
    img = load_pgm(data_dir / "images" / f"{sid}.pgm")
    mask = load_pgm(data_dir / "masks" / f"{sid}.pgm")
    return SamplePair(image=img, mask=(mask >= 0.5).astype(np.uint8), id=sid, spacing_mm=spacing_mm)


# --------------------------------------------------------------------------
# synthetic lesions


def synth_sample(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One speckled B-mode-like image with a dark elliptical lesion."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # depth-dependent attenuation of the tissue background
    base = 0.62 - 0.18 * yy / size + 0.05 * rng.standard_normal()
    speckle = rng.gamma(shape=3.0, scale=1.0 / 3.0, size=(size, size))
    speckle = gaussian_filter(speckle, 0.7 + 0.3 * rng.random())

    a = size * rng.uniform(0.14, 0.28)
    b = size * rng.uniform(0.12, 0.24)
    margin = max(a, b) + 2
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    r = u * u + v * v
    mask = (r <= 1.0).astype(np.uint8)

    dip = rng.uniform(0.55, 0.75)
    soft = expit((1.0 - r) * 12.0)
    img = base * (1.0 - dip * soft)
    # mild posterior shadow in the columns under the lesion
    below = (yy > cy) & (np.abs(dx) < 0.8 * a)
    shade = rng.uniform(0.05, 0.15)
    img = img * (1.0 - shade * below * (1.0 - soft))
    img = np.clip(img * speckle, 0.0, 1.0)
    return img, mask


def synth_dataset(count: int, size: int, seed: int, out_dir: str | Path) -> list[str]:
    """Write ``count`` image/mask PGM pairs plus ``labels.txt``; returns ids."""
    if count < 1:
        raise DataError("count must be >= 1")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    ids = []
    for i in range(count):
        sid = f"case{i:04d}"
        img, mask = synth_sample(size, np.random.default_rng([seed, i]))
        save_pgm(img, out / "images" / f"{sid}.pgm")
        save_pgm(mask * np.uint8(255), out / "masks" / f"{sid}.pgm")
        ids.append(sid)
    (out / "labels.txt").write_text("".join(f"{sid} lesion\n" for sid in ids))
    log.info("wrote %d synthetic samples to %s", count, out)
    return ids
