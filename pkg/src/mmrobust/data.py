"""Datasets: IDX ingestion, FMNIST desk preset, and synthetic sequence/image generators."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import RngStream
from .report import atomic_write


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.y)

    def onehot(self, idx=None) -> np.ndarray:
        y = self.y if idx is None else self.y[idx]
        return np.eye(self.n_classes)[y]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.n_classes)


# -- IDX ------------------------------------------------------------------


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX payload of rank 1 to 3."""
    buf = bytes(buf)
    if len(buf) < 4:
        raise IdxFormatError("truncated header: need at least 4 bytes")
    if buf[0] != 0 or buf[1] != 0:
        raise IdxFormatError(f"bad magic: leading bytes {buf[0]:#04x} {buf[1]:#04x}, expected 0x00 0x00")
    if buf[2] != 0x08:
        raise IdxFormatError(f"unsupported element type {buf[2]:#04x} (only 0x08 unsigned byte)")
    rank = buf[3]
    if not 1 <= rank <= 3:
        raise IdxFormatError(f"rank {rank} outside 1..3")
    head = 4 + 4 * rank
    if len(buf) < head:
        raise IdxFormatError(f"truncated header: need {head} bytes, got {len(buf)}")
    dims = struct.unpack(f">{rank}I", buf[4:head])
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - head < n:
        raise IdxFormatError(f"truncated payload: expected {n} bytes, got {len(buf) - head}")
    if len(buf) - head > n:
        raise IdxFormatError(f"trailing data: expected {n} payload bytes, got {len(buf) - head}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=head).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if not 1 <= arr.ndim <= 3:
        raise IdxFormatError(f"rank {arr.ndim} outside 1..3")
    return bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


FMNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _find(data_dir: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz"):
        if (data_dir / cand).exists():
            return data_dir / cand
    raise FileNotFoundError(f"missing IDX file {stem}[.gz] in {data_dir}")


def load_fmnist_idx(data_dir) -> dict[str, np.ndarray]:
    d = Path(data_dir)
    return {k: read_idx(_find(d, v)) for k, v in FMNIST_FILES.items()}


def pool_images(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    n, h, w = img.shape
    return img.reshape(n, h // factor, factor, w // factor, factor).max(axis=(2, 4))


@dataclass
class ImagePreset:
    name: str = "fmnist-desk-v1"
    pool: int = 2
    n_train: int = 10000
    n_val: int = 1000
    n_test: int = 2000


PRESETS = {
    "fmnist-desk-v1": ImagePreset(),
    "fmnist-desk-50k-v1": ImagePreset("fmnist-desk-50k-v1", 2, 50000, 1000, 2000),
    "fmnist-full-v1": ImagePreset("fmnist-full-v1", 1, 50000, 10000, 10000),
}


def load_fmnist(data_dir, preset: str | ImagePreset = "fmnist-desk-v1") -> dict[str, Dataset]:
    """Train/val/test splits from local IDX files, images scaled to [0, 1].

    Validation examples are taken from the end of the training file so
    they never overlap the training subset.
    """
    pr = PRESETS[preset] if isinstance(preset, str) else preset
    raw = load_fmnist_idx(data_dir)
    xtr = pool_images(raw["train_images"], pr.pool).astype(np.float32) / 255.0
    xte = pool_images(raw["test_images"], pr.pool).astype(np.float32) / 255.0
    ytr = raw["train_labels"].astype(np.int64)
    yte = raw["test_labels"].astype(np.int64)
    if pr.n_train + pr.n_val > len(ytr) or pr.n_test > len(yte):
        raise ValueError(f"preset {pr.name} needs more examples than {data_dir} provides")
    return {
        "train": Dataset(xtr[: pr.n_train], ytr[: pr.n_train], 10),
        "val": Dataset(xtr[len(ytr) - pr.n_val :], ytr[len(ytr) - pr.n_val :], 10),
        "test": Dataset(xte[: pr.n_test], yte[: pr.n_test], 10),
    }


# -- synthetic clothing-like images ---------------------------------------


def _box(img, r0, r1, c0, c1, v):
    img[max(r0, 0) : max(r1, 0), max(c0, 0) : max(c1, 0)] = np.maximum(
        img[max(r0, 0) : max(r1, 0), max(c0, 0) : max(c1, 0)], v
    )


def _draw_item(label: int, u: np.ndarray) -> np.ndarray:
    """Render one 28x28 silhouette; ``u`` is a vector of uniform draws."""
    img = np.zeros((28, 28))
    s = 0.75 + 0.4 * u[0]
    dr, dc_ = int(round(6 * u[1] - 3)), int(round(6 * u[2] - 3))
    v = 0.55 + 0.45 * u[3]

    def R(a):
        return int(round(14 + (a - 14) * s)) + dr

    def C(a):
        return int(round(14 + (a - 14) * s)) + dc_

    w = int(round(3 * u[4]))  # shape jitter
    if label == 0:  # t-shirt: body + short sleeves
        _box(img, R(6), R(24), C(8 - w // 2), C(20 + w // 2), v)
        _box(img, R(6), R(11), C(3), C(25), v)
    elif label == 1:  # trouser: two legs
        _box(img, R(4), R(25), C(9), C(13), v)
        _box(img, R(4), R(25), C(15), C(19), v)
        _box(img, R(4), R(8), C(9), C(19), v)
    elif label == 2:  # pullover: body + long sleeves
        _box(img, R(5), R(23), C(8), C(20), v)
        _box(img, R(5), R(21 - w), C(3), C(7), v * 0.9)
        _box(img, R(5), R(21 - w), C(21), C(25), v * 0.9)
    elif label == 3:  # dress: widening trapezoid
        for r in range(4, 25):
            half = 3 + (r - 4) * (0.35 + 0.1 * u[4])
            _box(img, R(r), R(r) + 1, C(int(14 - half)), C(int(14 + half)), v)
    elif label == 4:  # coat: long sleeves + dark front seam
        _box(img, R(4), R(25), C(8), C(20), v)
        _box(img, R(5), R(23), C(3), C(7), v * 0.9)
        _box(img, R(5), R(23), C(21), C(25), v * 0.9)
        img[max(R(6), 0) : max(R(25), 0), C(14)] *= 0.3
    elif label == 5:  # sandal: sparse straps near the bottom
        for r in (15, 18, 21):
            _box(img, R(r), R(r + 1 + w % 2), C(3), C(25), v)
        _box(img, R(22), R(24), C(3), C(25), v * 0.8)
    elif label == 6:  # shirt: sleeves + collar notch + buttons
        _box(img, R(6), R(24), C(8), C(20), v * 0.85)
        _box(img, R(6), R(18 - w), C(4), C(8), v * 0.8)
        _box(img, R(6), R(18 - w), C(20), C(24), v * 0.8)
        for r in range(9, 23, 3):
            img[min(max(R(r), 0), 27), min(max(C(14), 0), 27)] = 0.15
        img[max(R(5), 0) : max(R(8), 0), max(C(12), 0) : max(C(16), 0)] = 0.0
    elif label == 7:  # sneaker: low wide shoe
        _box(img, R(16), R(23), C(3), C(25), v)
        _box(img, R(12), R(17), C(3), C(13 + w), v)
    elif label == 8:  # bag: square body + handle
        _box(img, R(11), R(24), C(5), C(23), v)
        _box(img, R(5), R(7), C(9), C(19), v * 0.9)
        _box(img, R(5), R(12), C(9), C(11), v * 0.9)
        _box(img, R(5), R(12), C(17), C(19), v * 0.9)
    elif label == 9:  # ankle boot: L shape
        _box(img, R(5), R(23), C(12), C(20), v)
        _box(img, R(17), R(23), C(4), C(24), v)
    return img


def synth_fmnist_arrays(n: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Balanced 10-class 28x28 uint8 silhouettes.

    Each item is blended with a fainter distractor silhouette of another
    class and overlaid with multiplicative texture noise, so classes overlap
    roughly as much as the real clothing images do.
    """
    labels = np.arange(n) % 10
    labels = labels[rng.fork("order").permutation(n)]
    u = rng.fork("shape").uniform((n, 8))
    ud = rng.fork("distractor").uniform((n, 8))
    noise = rng.fork("noise").normal((n, 28, 28))
    imgs = np.empty((n, 28, 28))
    for i in range(n):
        other = (int(labels[i]) + 1 + int(ud[i, 7] * 9)) % 10
        imgs[i] = np.maximum(_draw_item(int(labels[i]), u[i]), (0.55 * ud[i, 6]) * _draw_item(other, ud[i]))
    imgs = imgs * (0.85 + 0.35 * noise)
    p = np.pad(imgs, ((0, 0), (1, 1), (1, 1)))
    blur = sum(p[:, a : a + 28, b : b + 28] for a in range(3) for b in range(3)) / 9.0
    imgs = 0.4 * imgs + 0.6 * blur + 0.12 * np.abs(noise[:, ::-1, :])
    return (np.clip(imgs, 0, 1) * 255).round().astype(np.uint8), labels.astype(np.uint8)


def write_synth_fmnist(data_dir, seed: int = 0, n_train: int = 51000, n_test: int = 2000) -> Path:
    """Write a synthetic stand-in for FMNIST in the four standard IDX files."""
    d = Path(data_dir)
    d.mkdir(parents=True, exist_ok=True)
    root = RngStream(seed).fork("synth_fmnist")
    xtr, ytr = synth_fmnist_arrays(n_train, root.fork("train"))
    xte, yte = synth_fmnist_arrays(n_test, root.fork("test"))
    for key, arr in (("train_images", xtr), ("train_labels", ytr), ("test_images", xte), ("test_labels", yte)):
        atomic_write(d / FMNIST_FILES[key], encode_idx(arr))
    return d


# -- synthetic ECG-like sequences -----------------------------------------

ECG_CLASSES = ("normal", "premature", "missing", "noisy")


def _beat(t: np.ndarray, center: float, amp: float) -> np.ndarray:
    qrs = amp * np.exp(-0.5 * ((t - center) / 0.9) ** 2)
    dip = -0.25 * amp * np.exp(-0.5 * ((t - center - 2.0) / 1.0) ** 2)
    twave = 0.3 * amp * np.exp(-0.5 * ((t - center - 6.0) / 2.0) ** 2)
    return qrs + dip + twave


def synth_ecg(n_sequences: int, length: int, rng: RngStream, gain: float = 1.0) -> Dataset:
    """Periodic pulse trains in 4 balanced classes, as N x length x 2 input currents.

    Classes: regular rhythm; one premature beat; one dropped beat; regular
    rhythm on a wandering, noisy baseline. Channel 0 is the trace, channel 1
    its sign-inverted copy, so input neurons can respond to either polarity.
    """
    if length < 50:
        raise ValueError("length must be at least 50")
    labels = (np.arange(n_sequences) % 4)[rng.fork("order").permutation(n_sequences)]
    u = rng.fork("morph").uniform((n_sequences, 6))
    noise = rng.fork("noise").normal((n_sequences, length))
    t = np.arange(length, dtype=np.float64)
    x = np.empty((n_sequences, length, 2))
    for i in range(n_sequences):
        # five beat slots, all inside the window, so edits change the visible rhythm
        period = length / (5.2 + 0.4 * u[i, 0])
        phase = (0.3 + 0.4 * u[i, 1]) * period
        amp = 0.9 + 0.2 * u[i, 2]
        centers = list(phase + period * np.arange(5))
        k = 1 + min(int(u[i, 3] * 4), 3)
        lab = labels[i]
        if lab == 1:
            centers[k] = centers[k - 1] + (0.35 + 0.1 * u[i, 4]) * period
        elif lab == 2:
            del centers[k]
        sig = sum(_beat(t, c, amp) for c in centers)
        sig = sig + 0.05 * noise[i]
        if lab == 3:
            wander = 0.5 * np.sin(2 * np.pi * t / (length * (0.5 + 0.5 * u[i, 5])) + 6.0 * u[i, 4])
            sig = sig + wander + 0.15 * noise[i]
        x[i, :, 0] = sig
        x[i, :, 1] = -sig
    return Dataset((gain * x).astype(np.float32), labels.astype(np.int64), 4)


def synth_spike(
    n_sequences: int,
    length: int,
    rng: RngStream,
    n_channels: int = 16,
    n_classes: int = 4,
    rate: float = 0.03,
    jitter: int = 2,
    gain: float = 1.0,
) -> Dataset:
    """Class-specific spatio-temporal spike templates with timing jitter, deletions and background spikes."""
    tmpl_rng = rng.fork("templates")
    templates = tmpl_rng.uniform((n_classes, length, n_channels)) < rate
    labels = (np.arange(n_sequences) % n_classes)[rng.fork("order").permutation(n_sequences)]
    shifts = np.floor(rng.fork("jitter").uniform((n_sequences, n_channels)) * (2 * jitter + 1)).astype(int) - jitter
    keep = rng.fork("delete").uniform((n_sequences, length, n_channels)) > 0.1
    background = rng.fork("background").uniform((n_sequences, length, n_channels)) < rate / 4
    x = np.zeros((n_sequences, length, n_channels))
    for i in range(n_sequences):
        tm = templates[labels[i]]
        for ch in range(n_channels):
            x[i, :, ch] = np.roll(tm[:, ch], shifts[i, ch])
    x = (x * keep) + background
    return Dataset((gain * np.minimum(x, 1.0)).astype(np.float32), labels.astype(np.int64), n_classes)


def split(ds: Dataset, fractions=(0.7, 0.15, 0.15)) -> dict[str, Dataset]:
    n = len(ds)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    idx = np.arange(n)
    return {"train": ds.subset(idx[:a]), "val": ds.subset(idx[a:b]), "test": ds.subset(idx[b:])}


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
