"""Dataset ingestion: IDX files (MNIST layout) and labeled image folders.

All pixel data is normalized to [-1, 1] so that classifiers, the attack
surrogate and the tanh-output generator share one value domain.
"""

from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """IDX stream violates the expected encoding."""


@dataclass
class LabeledImageSet:
    """Images (n, c, h, w) in [-1, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [-1, 1]")

    def __len__(self):
        return len(self.images)

    @property
    def flat(self):
        """Images as (n, c*h*w) rows for flat-input models."""
        return self.images.reshape(len(self.images), -1)

    @property
    def input_dim(self):
        return int(np.prod(self.images.shape[1:]))

    def one_hot(self, dtype=np.float32):
        eye = np.eye(self.num_classes, dtype=dtype)
        return eye[self.labels]


def normalize_bytes(u8):
    """Affine [0, 255] -> [-1, 1] (0 -> -1.0, 255 -> +1.0 exactly)."""
    return (np.asarray(u8).astype(np.float32) / 127.5) - 1.0


def denormalize_to_bytes(v):
    """Inverse of normalize_bytes onto the byte grid (exact round trip)."""
    return np.clip(np.round((np.asarray(v) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _read_idx(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":  # transparently accept gzipped files
        raw = gzip.decompress(raw)
    return raw


def load_idx(image_path, label_path, split="train"):
    """Load an IDX image/label file pair into a LabeledImageSet."""
    img_raw = _read_idx(image_path)
    lbl_raw = _read_idx(label_path)

    if len(img_raw) < 16:
        raise IdxFormatError(f"{image_path}: only {len(img_raw)} bytes, "
                             "expected 16-byte image header at offset 0")
    magic, n, rows, cols = struct.unpack(">IIII", img_raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"{image_path}: bad magic 0x{magic:08x} at offset 0, "
                             f"expected 0x{IDX_IMAGE_MAGIC:08x}")
    need = n * rows * cols
    if len(img_raw) - 16 != need:
        raise IdxFormatError(f"{image_path}: payload of {len(img_raw) - 16} bytes "
                             f"at offset 16, header declares {need}")

    if len(lbl_raw) < 8:
        raise IdxFormatError(f"{label_path}: only {len(lbl_raw)} bytes, "
                             "expected 8-byte label header at offset 0")
    lmagic, ln = struct.unpack(">II", lbl_raw[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"{label_path}: bad magic 0x{lmagic:08x} at offset 0, "
                             f"expected 0x{IDX_LABEL_MAGIC:08x}")
    if len(lbl_raw) - 8 != ln:
        raise IdxFormatError(f"{label_path}: payload of {len(lbl_raw) - 8} bytes "
                             f"at offset 8, header declares {ln}")
    if ln != n:
        raise IdxFormatError(f"count mismatch: {n} images vs {ln} labels")

    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    images = normalize_bytes(pixels).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    return LabeledImageSet(images, labels, num_classes=int(labels.max()) + 1 if n else 0,
                           split=split)


def load_image_folder(root, resize, split="train"):
    """Load `root/<class-name>/*` images, one subdirectory per class.

    Class ids follow lexicographic subdirectory order. Images are resized
    to (h, w) with bilinear interpolation; undecodable files are skipped
    with a warning; an empty class directory is an error. Output is
    grayscale if every image is grayscale, RGB otherwise.
    """
    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class subdirectories")
    h, w = resize

    decoded = []  # (class_id, PIL image)
    any_color = False
    for cid, cdir in enumerate(class_dirs):
        count = 0
        for f in sorted(cdir.iterdir()):
            if not f.is_file():
                continue
            try:
                img = Image.open(f)
                img.load()
            except (UnidentifiedImageError, OSError) as exc:
                warnings.warn(f"skipping undecodable {f}: {exc}")
                continue
            if img.mode != "L":
                any_color = True
            decoded.append((cid, img))
            count += 1
        if count == 0:
            raise ValueError(f"empty class directory {cdir}")

    mode = "RGB" if any_color else "L"
    channels = 3 if any_color else 1
    images = np.empty((len(decoded), channels, h, w), dtype=np.float32)
    labels = np.empty(len(decoded), dtype=np.int64)
    for i, (cid, img) in enumerate(decoded):
        img = img.convert(mode)
        if img.size != (w, h):
            img = img.resize((w, h), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.uint8)
        if channels == 1:
            arr = arr[None, :, :]
        else:
            arr = arr.transpose(2, 0, 1)
        images[i] = normalize_bytes(arr)
        labels[i] = cid
    return LabeledImageSet(images, labels, num_classes=len(class_dirs), split=split)


def split_train_test(dataset, test_fraction, seed):
    """Disjoint random split covering the whole set."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test_idx = order[:n_test]
    train_idx = order[n_test:]
    mk = lambda idx, tag: LabeledImageSet(dataset.images[idx], dataset.labels[idx],
                                          dataset.num_classes, split=tag)
    return mk(train_idx, "train"), mk(test_idx, "test")


def merge(a, b, split="all"):
    """Concatenate two sets over the same label space."""
    if a.num_classes != b.num_classes:
        raise ValueError("class count mismatch")
    return LabeledImageSet(np.concatenate([a.images, b.images]),
                           np.concatenate([a.labels, b.labels]),
                           a.num_classes, split=split)
