"""On-disk formats, preprocessing, and the synthetic phase-encoded dataset.

CVSL slice file (little-endian)::

    b"CVSL" | u16 version=1 | u16 label | u32 height | u32 width | H*W x (f32 re, f32 im)

Manifests are UTF-8 text, one ``path<TAB>label`` record per line, paths
relative to the manifest's directory.  Lines starting with ``#`` carry
metadata (class names, split).
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ComplexTensor

CVSL_MAGIC = b"CVSL"
CVSL_VERSION = 1
_CVSL_HEADER = struct.Struct("<4sHHII")

CKPT_MAGIC = b"CVCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")

TRAIN_FRACTION = 0.7


class DataFormatError(Exception):
    code = "format"


class BadMagicError(DataFormatError):
    code = "bad-magic"


class TruncatedError(DataFormatError):
    code = "truncated"


class VersionError(DataFormatError):
    code = "version"


class SpecMismatchError(DataFormatError):
    code = "spec-mismatch"


@dataclass
class SliceRecord:
    image: ComplexTensor  # [1, H, W]
    label: int
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ValueError(f"slice image must be [1,H,W], got {self.image.shape}")
        if min(self.image.shape[1:]) < 1:
            raise ValueError("slice height and width must be >= 1")
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")


# ---------------------------------------------------------------------------
# CVSL


def write_cvsl(path, record: SliceRecord) -> None:
    re = record.image.re[0]
    im = record.image.im[0]
    if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
        raise ValueError(f"slice {record.id!r} holds non-finite values")
    if record.label > 0xFFFF:
        raise ValueError(f"label {record.label} does not fit in u16")
    h, w = re.shape
    payload = np.empty((h, w, 2), dtype="<f4")
    payload[..., 0] = re
    payload[..., 1] = im
    with open(path, "wb") as fh:
        fh.write(_CVSL_HEADER.pack(CVSL_MAGIC, CVSL_VERSION, record.label, h, w))
        fh.write(payload.tobytes())


def read_cvsl(path, dtype=np.float32) -> SliceRecord:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: {len(raw)} bytes, no header")
    if raw[:4] != CVSL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _CVSL_HEADER.size:
        raise TruncatedError(f"{path}: header truncated at {len(raw)} bytes")
    _, version, label, h, w = _CVSL_HEADER.unpack_from(raw)
    if version != CVSL_VERSION:
        raise VersionError(f"{path}: version {version}, expected {CVSL_VERSION}")
    need = _CVSL_HEADER.size + 8 * h * w
    if len(raw) < need:
        raise TruncatedError(f"{path}: payload has {len(raw) - _CVSL_HEADER.size} bytes, expected {8 * h * w}")
    payload = np.frombuffer(raw, dtype="<f4", count=2 * h * w, offset=_CVSL_HEADER.size).reshape(h, w, 2)
    image = ComplexTensor(payload[None, :, :, 0], payload[None, :, :, 1], dtype=dtype)
    return SliceRecord(image, int(label), Path(path).stem)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    class_names: list[str]
    records: list[tuple[str, int]]
    split: str = "train"

    def __post_init__(self):
        paths = [p for p, _ in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest file paths must be unique")
        k = len(self.class_names)
        for p, label in self.records:
            if not 0 <= label < k:
                raise ValueError(f"{p}: label {label} outside [0, {k})")


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = ["# classes\t" + "\t".join(manifest.class_names), f"# split\t{manifest.split}"]
    lines += [f"{p}\t{label}" for p, label in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    class_names: list[str] = []
    split = Path(path).stem
    records = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, *vals = line[1:].strip().split("\t")
            if key == "classes":
                class_names = vals
            elif key == "split" and vals:
                split = vals[0]
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{path}:{n}: expected 'path<TAB>label'")
        records.append((parts[0], int(parts[1])))
    if not class_names:
        k = max((label for _, label in records), default=-1) + 1
        class_names = [f"class_{i}" for i in range(k)]
    return DatasetManifest(class_names, records, split)


# ---------------------------------------------------------------------------
# preprocessing


def _center_fit(plane: np.ndarray, target: int, axis: int) -> np.ndarray:
    n = plane.shape[axis]
    if n > target:
        start = (n - target) // 2
        return np.take(plane, np.arange(start, start + target), axis=axis)
    if n < target:
        before = (target - n) // 2
        widths = [(0, 0)] * plane.ndim
        widths[axis] = (before, target - n - before)
        return np.pad(plane, widths)
    return plane


def preprocess(record: SliceRecord, target: int) -> SliceRecord:
    """Center-crop or zero-pad to target x target, then normalize by the maximum modulus.

    Cropping comes first so the result always peaks at modulus 1, which
    also makes the operation idempotent.  A slice whose maximum modulus is
    already 1 to within rounding is left unscaled.
    """
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    re, im = record.image.re, record.image.im
    for axis in (1, 2):
        re = _center_fit(re, target, axis)
        im = _center_fit(im, target, axis)
    mag = np.sqrt(re * re + im * im)
    peak = float(mag.max()) if mag.size else 0.0
    if peak > 0 and abs(peak - 1.0) > 4 * np.finfo(re.dtype).eps:
        re = re / re.dtype.type(peak)
        im = im / im.dtype.type(peak)
    return SliceRecord(ComplexTensor(re, im, dtype=record.image.dtype), record.label, record.id)


# ---------------------------------------------------------------------------
# in-memory datasets


@dataclass
class ArrayDataset:
    """Stacked slices: ``re``/``im`` of shape [N,1,H,W] plus integer labels."""

    re: np.ndarray
    im: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.re.shape != self.im.shape or self.re.shape[0] != self.labels.shape[0]:
            raise ValueError("planes and labels disagree in length")
        if not self.class_names and len(self.labels):
            self.class_names = [f"class_{i}" for i in range(int(self.labels.max()) + 1)]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def batch(self, idx) -> tuple[ComplexTensor, np.ndarray]:
        return ComplexTensor.wrap(self.re[idx], self.im[idx]), self.labels[idx]

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ArrayDataset(self.re[idx], self.im[idx], self.labels[idx], list(self.class_names),
                            [self.ids[i] for i in idx] if self.ids else [])

    @classmethod
    def from_records(cls, records, class_names=None, dtype=np.float32) -> "ArrayDataset":
        records = list(records)
        if not records:
            return cls(np.zeros((0, 1, 1, 1), dtype), np.zeros((0, 1, 1, 1), dtype), np.zeros(0, np.int64),
                       list(class_names or []))
        re = np.stack([r.image.re for r in records]).astype(dtype)
        im = np.stack([r.image.im for r in records]).astype(dtype)
        labels = np.array([r.label for r in records], dtype=np.int64)
        return cls(re, im, labels, list(class_names or []), [r.id for r in records])


def load_split(data_dir, split: str, target: int | None = None, dtype=np.float32) -> ArrayDataset:
    """Read ``<data_dir>/<split>.tsv`` and every slice it lists, preprocessed to ``target``."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir / f"{split}.tsv")
    records = []
    for rel, label in manifest.records:
        rec = read_cvsl(data_dir / rel, dtype=dtype)
        if rec.label != label:
            raise DataFormatError(f"{rel}: manifest label {label} but file label {rec.label}")
        if target is not None:
            rec = preprocess(rec, target)
        records.append(rec)
    return ArrayDataset.from_records(records, manifest.class_names, dtype)


# ---------------------------------------------------------------------------
# synthetic phase-encoded dataset


def frequency_directions(size: int) -> list[tuple[int, int]]:
    """Pairwise non-parallel integer frequency pairs usable at this image size.

    Each pair is a primitive direction scaled by ``size // 4`` so that the
    phase advances by 0.25 rad per pixel along an axis; components are capped
    at ``size`` (at most 1 rad per pixel).
    """
    scale = max(1, size // 4)
    reach = max(1, size // scale)
    dirs = []
    for a in range(0, reach + 1):
        for b in range(-reach, reach + 1):
            if (a, b) == (0, 0) or math.gcd(a, abs(b)) != 1:
                continue
            if a == 0 and b < 0:
                continue  # same line as (0, 1)
            dirs.append((a, b))
    dirs.sort(key=lambda d: (max(abs(d[0]), abs(d[1])), math.atan2(d[1], d[0]) % math.pi))
    return [(scale * a, scale * b) for a, b in dirs]


def _phase_sample(rng, size, freq, rayleigh_scale, noise_sigma):
    u, v = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    k, l = freq
    mod = rng.rayleigh(rayleigh_scale, (size, size))
    phase = (k * u + l * v) / size
    if noise_sigma > 0:
        phase = phase + rng.normal(0.0, noise_sigma, (size, size))
    return mod * np.cos(phase), mod * np.sin(phase)


def _amplitude_scale_map(size: int, label: int) -> np.ndarray:
    """Rayleigh scale for the amplitude-discriminable control: a central
    half-size target region whose brightness grows with the class index."""
    scale = np.ones((size, size))
    lo, hi = size // 4, size - size // 4
    scale[lo:hi, lo:hi] = 1.0 + label
    return scale


@dataclass
class GeneratedDataset:
    out_dir: Path
    train: DatasetManifest
    test: DatasetManifest
    frequencies: list[tuple[int, int]]


def generate_phase_dataset(out_dir, num_classes: int = 3, samples_per_class: int = 200, size: int = 32,
                           amplitude_discriminable: bool = False, noise_sigma: float = 0.3,
                           seed: int = 0) -> GeneratedDataset:
    """Write a synthetic complex-slice classification set.

    Each class owns a phase ramp ``exp(j (k u + l v) / size)`` with a class
    specific integer frequency pair.  Moduli are Rayleigh speckle with one
    shared scale, so ``|z|`` carries no class information unless
    ``amplitude_discriminable`` is set.  Per-pixel phase noise is
    Normal(0, noise_sigma^2).  Each class is split 70/30 into train/test.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    if samples_per_class < 2:
        raise ValueError(f"need at least 2 samples per class, got {samples_per_class}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    freqs = frequency_directions(size)
    if num_classes > len(freqs):
        raise ValueError(f"{num_classes} classes requested but only {len(freqs)} distinct "
                         f"frequency directions exist at size {size}")
    freqs = freqs[:num_classes]

    out_dir = Path(out_dir)
    (out_dir / "slices").mkdir(parents=True, exist_ok=True)
    class_names = [f"class_{c}" for c in range(num_classes)]
    n_train = int(round(TRAIN_FRACTION * samples_per_class))
    train, test = [], []
    for c in range(num_classes):
        split_rng = np.random.default_rng([seed, c, 1 << 20])
        order = split_rng.permutation(samples_per_class)
        in_train = np.zeros(samples_per_class, dtype=bool)
        in_train[order[:n_train]] = True
        scale = _amplitude_scale_map(size, c) if amplitude_discriminable else 1.0
        for i in range(samples_per_class):
            rng = np.random.default_rng([seed, c, i])
            re, im = _phase_sample(rng, size, freqs[c], scale, noise_sigma)
            sid = f"c{c}_{i:05d}"
            rel = f"slices/{sid}.cvsl"
            write_cvsl(out_dir / rel, SliceRecord(ComplexTensor(re[None], im[None], dtype=np.float32), c, sid))
            (train if in_train[i] else test).append((rel, c))
    train_m = DatasetManifest(class_names, train, "train")
    test_m = DatasetManifest(class_names, test, "test")
    write_manifest(out_dir / "train.tsv", train_m)
    write_manifest(out_dir / "test.tsv", test_m)
    return GeneratedDataset(out_dir, train_m, test_m, freqs)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, adam_state=None) -> None:
    """Binary container: magic, version, JSON header, then float32 planes.

    Payload order: every parameter (re, im); every buffer; then, if present,
    the Adam first and second moments of every parameter (re, im each).
    """
    params = model.named_parameters()
    buffers = model.buffers()
    for name, p in params.items():
        if not (np.all(np.isfinite(p.re)) and np.all(np.isfinite(p.im))):
            raise ValueError(f"parameter {name} is not finite")
    header = {
        "spec": model.spec.to_dict(),
        "params": [{"name": n, "shape": list(p.shape), "kind": p.kind, "trainable": p.trainable,
                    "frozen_imag": p.frozen_imag} for n, p in params.items()],
        "buffers": [{"name": n, "shape": list(b.shape)} for n, b in buffers.items()],
        "adam_step": None if adam_state is None else int(adam_state.step),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)), blob]
    for p in params.values():
        chunks += [p.re.astype("<f4").tobytes(), p.im.astype("<f4").tobytes()]
    for b in buffers.values():
        chunks.append(b.astype("<f4").tobytes())
    if adam_state is not None:
        for moments in (adam_state.m, adam_state.v):
            for n, p in params.items():
                mre, mim = moments.get(n, (np.zeros(p.shape), np.zeros(p.shape)))
                chunks += [np.asarray(mre).astype("<f4").tobytes(), np.asarray(mim).astype("<f4").tobytes()]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def checkpoint_size(model, with_adam: bool = True, header_bytes: int = 0) -> int:
    """Expected file size: 4 bytes per stored real, times (weights + 2 moments)."""
    n_complex = sum(p.value.size for p in model.parameters())
    n_buffers = sum(b.size for b in model.buffers().values())
    return _CKPT_HEADER.size + header_bytes + 4 * (2 * n_complex * (3 if with_adam else 1) + n_buffers)


def load_checkpoint(path, model=None):
    """Restore ``(model, adam_state)``; ``adam_state`` is None if none was saved.

    With ``model`` given, its spec must match the stored one and its
    parameters are overwritten in place.
    """
    from .models import Model, ModelSpec
    from .train import AdamState

    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: file too short")
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _CKPT_HEADER.size:
        raise TruncatedError(f"{path}: header truncated")
    _, version, hlen = _CKPT_HEADER.unpack_from(raw)
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = _CKPT_HEADER.size
    if len(raw) < off + hlen:
        raise TruncatedError(f"{path}: header truncated")
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    spec = ModelSpec.from_dict(header["spec"])
    if model is None:
        model = Model(spec, seed=0, dtype=np.float32)
    elif model.spec != spec:
        raise SpecMismatchError(f"{path}: checkpoint spec {spec} does not match model spec {model.spec}")

    def take(shape):
        nonlocal off
        n = int(np.prod(shape, dtype=np.int64))
        if len(raw) < off + 4 * n:
            raise TruncatedError(f"{path}: payload truncated at byte {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        return arr

    params = model.named_parameters()
    entries = header["params"]
    if [e["name"] for e in entries] != list(params):
        raise SpecMismatchError(f"{path}: parameter layout differs from the model")
    for e in entries:
        p = params[e["name"]]
        shape = tuple(e["shape"])
        if shape != p.shape:
            raise SpecMismatchError(f"{path}: {e['name']} has shape {shape}, model expects {p.shape}")
        re = take(shape).astype(model.dtype)
        im = take(shape).astype(model.dtype)
        p.frozen_imag = e["frozen_imag"]
        p.trainable = e["trainable"]
        p.set_planes(re, im)
    buffers = model.buffers()
    for e in header["buffers"]:
        if e["name"] not in buffers:
            raise SpecMismatchError(f"{path}: unknown buffer {e['name']}")
        buffers[e["name"]][...] = take(tuple(e["shape"]))
    adam_state = None
    if header["adam_step"] is not None:
        adam_state = AdamState(step=header["adam_step"])
        for store in (adam_state.m, adam_state.v):
            for e in entries:
                shape = tuple(e["shape"])
                store[e["name"]] = [take(shape).astype(model.dtype), take(shape).astype(model.dtype)]
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return model, adam_state
