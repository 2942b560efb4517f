"""Datasets, synthetic gratings, corruption benchmark, label noise and anomaly sets.

All transforms are per-sample deterministic: each sample draws its noise from
a generator seeded by ``(seed, stream, sample_id)``, so applying a transform
commutes with reordering the dataset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, FormatError, ValidationError

CIFAR_RECORD = 3073
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

DATASET_MAGIC = b"ANCHDSET"
DATASET_VERSION = 1

CORRUPTION_KINDS = (
    "gaussian_noise",
    "impulse_noise",
    "gaussian_blur",
    "contrast",
    "brightness",
    "pixelate",
)

# severity 1..5; each row is strictly monotone in corruption strength
SEVERITY_TABLE = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),
    "impulse_noise": (0.01, 0.03, 0.06, 0.10, 0.17),
    "gaussian_blur": (0.4, 0.6, 0.9, 1.3, 1.8),
    "contrast": (0.75, 0.60, 0.45, 0.30, 0.20),
    "brightness": (0.05, 0.10, 0.15, 0.20, 0.30),
    "pixelate": (1.25, 1.5, 2.0, 2.5, 3.0),
}

_STREAM_IDS = {kind: i + 1 for i, kind in enumerate(CORRUPTION_KINDS)}
_LABEL_NOISE_STREAM = 101
_SYNTH_STREAM = 202
DEFAULT_AMPLITUDE = 0.06


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    provenance: list = field(default_factory=list)
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        # pixels live on the float32 grid (the container precision); differences of
        # such values are exact in float64, so reference + residual reconstructs x
        self.images = np.asarray(self.images, dtype=np.float32).astype(np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be NCHW, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValidationError("one label per image required")
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.images.shape[0], dtype=np.int64)
        else:
            self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx],
                       sample_ids=self.sample_ids[idx], provenance=list(self.provenance))

    def derive(self, images=None, labels=None, step: dict | None = None, **changes) -> "Dataset":
        prov = list(self.provenance) + ([step] if step else [])
        return replace(
            self,
            images=self.images if images is None else images,
            labels=self.labels if labels is None else labels,
            provenance=prov,
            **changes,
        )


def _sample_rng(seed: int, stream: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(sample_id)]))


# --------------------------------------------------------------------- CIFAR-10


def read_cifar10_batch(path, records_per_file: int | None = CIFAR_RECORDS_PER_FILE):
    """Parse one binary batch: 1 label byte + 3072 pixel bytes per record."""
    raw = Path(path).read_bytes()
    if records_per_file is not None:
        expected = records_per_file * CIFAR_RECORD
        if len(raw) != expected:
            raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    elif len(raw) % CIFAR_RECORD:
        expected = (len(raw) // CIFAR_RECORD + 1) * CIFAR_RECORD
        raise FormatError(f"{path}: expected a multiple of {CIFAR_RECORD} bytes (e.g. {expected}), found {len(raw)}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels


def write_cifar10_batch(path, images: np.ndarray, labels) -> None:
    """Inverse of :func:`read_cifar10_batch` for images in [0, 1]."""
    pix = np.rint(np.asarray(images) * 255.0).astype(np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pix], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_cifar10(directory, split: str = "train", records_per_file: int | None = CIFAR_RECORDS_PER_FILE) -> Dataset:
    files = {"train": CIFAR_TRAIN_FILES, "test": CIFAR_TEST_FILES}.get(split)
    if files is None:
        raise ValidationError(f"split must be 'train' or 'test', got {split!r}")
    directory = Path(directory)
    parts = [read_cifar10_batch(directory / f, records_per_file) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    if labels.size and labels.max() > 9:
        raise FormatError(f"label byte out of range: found {labels.max()}, expected <= 9")
    return Dataset(pixels / 255.0, labels, 10, name=f"cifar10-{split}",
                   provenance=[{"kind": "cifar10_binary", "split": split}])


# -------------------------------------------------------------- synthetic task


def grating(cls: int, num_classes: int, hw, shift=(0, 0), amplitude: float = DEFAULT_AMPLITUDE) -> np.ndarray:
    """Noise-free 3-channel sinusoidal grating for class ``cls`` of a ``num_classes`` family.

    Orientation is pi*cls/num_classes, spatial frequency 2 + (cls mod 3) cycles
    per image width; the three channels are phase-shifted by 2*pi/3.
    """
    h, w = hw
    theta = np.pi * cls / num_classes
    freq = 2 + int(cls) % 3
    yy, xx = np.meshgrid(np.arange(h) + shift[0], np.arange(w) + shift[1], indexing="ij")
    proj = (xx * np.cos(theta) + yy * np.sin(theta)) / w
    phases = 2 * np.pi * np.arange(3) / 3
    img = 0.5 + amplitude * np.sin(2 * np.pi * freq * proj[None] + phases[:, None, None])
    return img


def _render(classes, num_classes, hw, seed, ids, jitter, max_shift, amplitude=DEFAULT_AMPLITUDE):
    imgs = np.empty((len(classes), 3) + tuple(hw))
    for i, (c, sid) in enumerate(zip(classes, ids)):
        rng = _sample_rng(seed, _SYNTH_STREAM, sid)
        shift = rng.integers(-max_shift, max_shift + 1, size=2) if max_shift else (0, 0)
        img = grating(c, num_classes, hw, shift, amplitude)
        if jitter:
            img = img + rng.normal(0.0, jitter, size=img.shape)
        imgs[i] = np.clip(img, 0.0, 1.0)
    return imgs


def gen_synthetic(num_classes: int, n: int, hw=(16, 16), seed: int = 0, *, jitter: float = 0.05,
                  max_shift: int = 2, holdout_classes: int = 0, id_offset: int = 0,
                  amplitude: float = DEFAULT_AMPLITUDE) -> Dataset:
    """Balanced grating classification task.

    The gratings form a family of ``num_classes + holdout_classes`` evenly
    spaced orientations; only the first ``num_classes`` are generated here and
    the rest stay reserved for :func:`make_anomaly_set`. ``id_offset`` keeps
    sample ids (and thus per-sample noise) distinct between splits generated
    from the same seed.
    """
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    if holdout_classes < 0:
        raise ValidationError("holdout_classes must be >= 0")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    ids = np.arange(id_offset, id_offset + n, dtype=np.int64)
    imgs = _render(labels, num_classes + holdout_classes, hw, seed, ids, jitter, max_shift, amplitude)
    prov = {"kind": "synthetic", "seed": int(seed), "hw": list(hw), "jitter": jitter,
            "max_shift": max_shift, "amplitude": amplitude, "holdout_classes": int(holdout_classes), "id_offset": int(id_offset)}
    return Dataset(imgs, labels, num_classes, name="synthetic", provenance=[prov], sample_ids=ids)


def synthetic_splits(num_classes=10, n_train=5000, n_test=1000, hw=(16, 16), seed=0, holdout_classes=2,
                     **kwargs):
    train = gen_synthetic(num_classes, n_train, hw, seed, holdout_classes=holdout_classes, **kwargs)
    test = gen_synthetic(num_classes, n_test, hw, seed + 7919, holdout_classes=holdout_classes,
                         id_offset=n_train, **kwargs)
    return train, test


# ---------------------------------------------------------------- corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ValidationError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValidationError(f"severity must be in 1..5, got {self.severity}")

    @property
    def parameter(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity - 1]


def _blur_kernel(sigma: float) -> np.ndarray:
    r = np.arange(-2, 3, dtype=np.float64)
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _pixelate(img: np.ndarray, factor: float) -> np.ndarray:
    _, h, w = img.shape
    sh, sw = max(1, int(round(h / factor))), max(1, int(round(w / factor)))
    down_r = (np.arange(sh) * h) // sh
    down_c = (np.arange(sw) * w) // sw
    small = img[:, down_r][:, :, down_c]
    up_r = (np.arange(h) * sh) // h
    up_c = (np.arange(w) * sw) // w
    return small[:, up_r][:, :, up_c]


def apply_corruption(img: np.ndarray, kind: str, param: float, rng: np.random.Generator) -> np.ndarray:
    """Corrupt one CHW image with an explicit parameter value (no clamping)."""
    if kind == "gaussian_noise":
        return img + rng.normal(0.0, param, size=img.shape) if param > 0 else img.copy()
    if kind == "impulse_noise":
        flip = rng.random(img.shape) < param
        salt = rng.random(img.shape) < 0.5
        return np.where(flip, salt.astype(np.float64), img)
    if kind == "gaussian_blur":
        k = _blur_kernel(param)
        out = ndimage.correlate1d(img, k, axis=1, mode="nearest")
        return ndimage.correlate1d(out, k, axis=2, mode="nearest")
    if kind == "contrast":
        m = img.mean()
        return (img - m) * param + m
    if kind == "brightness":
        return img + param
    if kind == "pixelate":
        return _pixelate(img, param)
    raise ValidationError(f"unknown corruption kind {kind!r}")


def corrupt(ds: Dataset, spec: CorruptionSpec) -> Dataset:
    param = spec.parameter
    out = np.empty_like(ds.images)
    stream = _STREAM_IDS[spec.kind] * 10 + spec.severity
    for i, sid in enumerate(ds.sample_ids):
        rng = _sample_rng(spec.seed, stream, sid)
        out[i] = apply_corruption(ds.images[i], spec.kind, param, rng)
    np.clip(out, 0.0, 1.0, out=out)
    step = {"kind": "corrupted", "corruption": spec.kind, "severity": spec.severity, "seed": spec.seed}
    return ds.derive(images=out, step=step, name=f"{ds.name}-{spec.kind}-s{spec.severity}")


def inject_label_noise(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Flip exactly round(fraction*N) labels, each to a uniformly chosen other class."""
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError("fraction must lie in [0, 1]")
    n = len(ds)
    k = int(round(fraction * n))
    labels = ds.labels.copy()
    if k:
        keys = np.empty(n)
        offsets = np.empty(n, dtype=np.int64)
        for i, sid in enumerate(ds.sample_ids):
            rng = _sample_rng(seed, _LABEL_NOISE_STREAM, sid)
            keys[i] = rng.random()
            offsets[i] = rng.integers(1, ds.num_classes)
        chosen = np.argsort(keys, kind="stable")[:k]
        labels[chosen] = (labels[chosen] + offsets[chosen]) % ds.num_classes
    step = {"kind": "label_noised", "fraction": float(fraction), "seed": int(seed), "flipped": k}
    return ds.derive(labels=labels, step=step)


def make_anomaly_set(kind: str, base: Dataset, n: int, seed: int) -> Dataset:
    """Anomalies outside the training label space.

    ``uniform_noise`` draws iid U[0,1] pixels. ``class_holdout`` renders the
    grating classes reserved when the synthetic base was generated, which
    needs ``holdout_classes >= 2``. Anomaly labels start at ``base.num_classes``.
    """
    c, (h, w) = base.channels, base.hw
    if kind == "uniform_noise":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 303]))
        imgs = rng.random((n, c, h, w))
        labels = np.full(n, base.num_classes)
        return Dataset(imgs, labels, base.num_classes + 1, name="uniform_noise",
                       provenance=list(base.provenance) + [{"kind": "anomaly", "anomaly": kind, "seed": seed}])
    if kind == "class_holdout":
        root = base.provenance[0] if base.provenance else {}
        reserved = int(root.get("holdout_classes", 0)) if root.get("kind") == "synthetic" else 0
        if reserved < 2:
            raise ConfigurationError(f"class_holdout needs >= 2 reserved classes, base has {reserved}")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 404]))
        which = rng.permutation(np.arange(n) % reserved)
        ids = 10_000_000 + np.arange(n)
        imgs = _render(base.num_classes + which, base.num_classes + reserved, (h, w), seed, ids,
                       root.get("jitter", 0.05), root.get("max_shift", 2),
                       root.get("amplitude", DEFAULT_AMPLITUDE))
        labels = base.num_classes + which
        return Dataset(imgs, labels, base.num_classes + reserved, name="class_holdout",
                       provenance=list(base.provenance) + [{"kind": "anomaly", "anomaly": kind, "seed": seed}],
                       sample_ids=ids)
    raise ValidationError(f"unknown anomaly kind {kind!r}")


# ------------------------------------------------------------ container format


def save_dataset(ds: Dataset, path) -> None:
    prov = json.dumps(ds.provenance, sort_keys=True, separators=(",", ":")).encode()
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIIIII", DATASET_VERSION, n, c, h, w, ds.num_classes, len(prov)))
        fh.write(prov)
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[:8] != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic: expected {DATASET_MAGIC!r}, found {blob[:8]!r}")
    version, n, c, h, w, k, plen = struct.unpack_from("<IIIIIII", blob, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"dataset version mismatch: expected {DATASET_VERSION}, found {version}")
    pos = 8 + 28
    prov = json.loads(blob[pos : pos + plen])
    pos += plen
    expected = pos + 4 * n * c * h * w + 8 * n
    if len(blob) != expected:
        raise FormatError(f"dataset size mismatch: expected {expected} bytes, found {len(blob)}")
    imgs = np.frombuffer(blob, dtype="<f4", count=n * c * h * w, offset=pos).reshape(n, c, h, w)
    pos += 4 * n * c * h * w
    labels = np.frombuffer(blob, dtype="<i8", count=n, offset=pos)
    return Dataset(imgs.astype(np.float64), labels.copy(), k, name=Path(path).stem, provenance=prov)


def corruption_suite(ds: Dataset, kinds: Sequence[str] = CORRUPTION_KINDS,
                     severities: Sequence[int] = (1, 2, 3, 4, 5), seed: int = 0):
    """Yield ``(kind, severity, corrupted_dataset)`` for the full grid."""
    for kind in kinds:
        for sev in severities:
            yield kind, sev, corrupt(ds, CorruptionSpec(kind, sev, seed))
