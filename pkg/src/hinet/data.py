"""Volume I/O, intensity scaling, cropping, patching and phantom data.

Images are plain 2-D float32 arrays; volumes are (slices, rows, cols).
Two on-disk volume formats are understood:

* NIfTI-1 (``.nii`` / ``.nii.gz``), read through nibabel.  NIfTI stores
  (x, y, z); volumes are transposed to (z, y, x) so slices come first.
* HINV (``.hinv``): a 16-byte header ``b"HINV"`` followed by three
  little-endian uint32 dims (slices, rows, cols), then float32
  little-endian voxels in slice-major (C) order.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, DimensionError, FormatError, StructureError

HINV_MAGIC = b"HINV"
HINV_HEADER = struct.Struct("<4s3I")

CROP_SHAPE = (160, 180)
PATCH_SIZE = 128
MANIFEST_NAME = "manifest.json"


class Modality(str, enum.Enum):
    T1 = "T1"
    T1c = "T1c"
    T2 = "T2"
    Flair = "Flair"
    synthetic = "synthetic"


@dataclass
class Volume:
    subject_id: str
    modality: Modality
    data: np.ndarray
    intensity_range: tuple[float, float] = None

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(f"volume must be 3-D with every dim >= 1, got shape {self.data.shape}")
        if self.intensity_range is None:
            self.intensity_range = (float(self.data.min()), float(self.data.max()))

    @property
    def shape(self):
        return self.data.shape


@dataclass
class PatchSet:
    patches: list
    anchors: list
    parent_shape: tuple = CROP_SHAPE


@dataclass
class Sample:
    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    subject_id: str = ""
    slice_index: int = 0
    anchor: tuple = (0, 0)

    def __post_init__(self):
        if not (self.x1.shape == self.x2.shape == self.y.shape):
            raise DimensionError(
                f"sample images differ in shape: {self.x1.shape}, {self.x2.shape}, {self.y.shape}")


@dataclass
class DatasetSplit:
    train_ids: list
    test_ids: list
    seed: int


# --------------------------------------------------------------------------- I/O

def _volume_format(path):
    name = Path(path).name.lower()
    if name.endswith(".hinv"):
        return "hinv"
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    raise FormatError(f"unsupported volume extension: {path}")


def save_volume(path, volume):
    """Write ``volume`` (a :class:`Volume` or 3-D array) to ``path``.

    The format is chosen from the file extension.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    if data.ndim != 3 or min(data.shape) < 1:
        raise DimensionError(f"cannot write volume of shape {data.shape}")
    path = Path(path)
    if _volume_format(path) == "hinv":
        with open(path, "wb") as fh:
            fh.write(HINV_HEADER.pack(HINV_MAGIC, *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    else:
        import nibabel as nib

        img = nib.Nifti1Image(np.ascontiguousarray(data.transpose(2, 1, 0), dtype=np.float32), np.eye(4))
        nib.save(img, str(path))
    return path


def _read_hinv(path):
    raw = Path(path).read_bytes()
    if len(raw) < HINV_HEADER.size:
        raise FormatError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, *dims = HINV_HEADER.unpack_from(raw)
    if magic != HINV_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if min(dims) < 1:
        raise FormatError(f"{path}: header dims {tuple(dims)} contain a zero")
    expected = 4 * int(np.prod(dims))
    payload = raw[HINV_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header dims {tuple(dims)} need {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def _read_nifti(path):
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as exc:  # nibabel raises a zoo of types
        raise FormatError(f"{path}: unreadable NIfTI ({exc})") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise FormatError(f"{path}: expected a 3-D image, header dim gives {data.shape}")
    if min(data.shape) < 1:
        raise FormatError(f"{path}: header dims {data.shape} contain a zero")
    return np.ascontiguousarray(data.transpose(2, 1, 0))


def load_volume(path, modality, subject_id=None):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no such volume file: {path}")
    fmt = _volume_format(path)
    data = _read_hinv(path) if fmt == "hinv" else _read_nifti(path)
    if subject_id is None:
        subject_id = path.parent.name
    return Volume(subject_id, modality, data)


# --------------------------------------------------------------------------- preprocessing

def normalize_intensity(v):
    """Linearly map a volume's values onto [-1, 1].

    A constant volume maps to all zeros.  Accepts a :class:`Volume` (the
    raw ``intensity_range`` is kept) or a bare array.
    """
    data = v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise DataError("volume contains NaN or Inf")
    lo = np.float64(data.min())
    hi = np.float64(data.max())
    if hi == lo:
        out = np.zeros_like(data, dtype=np.float32)
    else:
        out = (2.0 * (data.astype(np.float64) - lo) / (hi - lo) - 1.0).astype(np.float32)
        # float rounding can miss the endpoints by an ulp
        out[data == hi] = 1.0
        out[data == lo] = -1.0
    if isinstance(v, Volume):
        return Volume(v.subject_id, v.modality, out, intensity_range=(float(lo), float(hi)))
    return out


def denormalize_intensity(img, intensity_range):
    lo, hi = intensity_range
    return ((np.asarray(img, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo).astype(np.float32)


def crop_offsets(shape, crop=CROP_SHAPE):
    return (shape[-2] - crop[0]) // 2, (shape[-1] - crop[1]) // 2


def center_crop(img, crop=CROP_SHAPE):
    """Centre crop over the last two axes (works on slices and whole volumes)."""
    img = np.asarray(img)
    if img.shape[-2] < crop[0] or img.shape[-1] < crop[1]:
        raise DimensionError(f"cannot crop {crop} out of {img.shape[-2:]}")
    r, c = crop_offsets(img.shape, crop)
    return img[..., r:r + crop[0], c:c + crop[1]]


def patch_anchors(shape=CROP_SHAPE, size=PATCH_SIZE):
    rows, cols = shape
    if rows < size or cols < size or rows > 2 * size or cols > 2 * size:
        raise DimensionError(f"four {size}x{size} corner patches cannot tile {shape}")
    r, c = rows - size, cols - size
    return [(0, 0), (0, c), (r, 0), (r, c)]


def extract_patches(img, size=PATCH_SIZE, shape=CROP_SHAPE):
    img = np.asarray(img, dtype=np.float32)
    if img.shape != tuple(shape):
        raise DimensionError(f"expected a {shape} image, got {img.shape}")
    anchors = patch_anchors(shape, size)
    patches = [img[r:r + size, c:c + size].copy() for r, c in anchors]
    return PatchSet(patches, anchors, tuple(shape))


def stitch_patches(ps):
    """Reassemble a :class:`PatchSet`, averaging wherever patches overlap."""
    if len(ps.patches) != len(ps.anchors) or not ps.patches:
        raise StructureError(f"{len(ps.patches)} patches but {len(ps.anchors)} anchors")
    rows, cols = ps.parent_shape
    total = np.zeros((rows, cols), dtype=np.float64)
    count = np.zeros((rows, cols), dtype=np.int32)
    for patch, (r, c) in zip(ps.patches, ps.anchors):
        patch = np.asarray(patch)
        h, w = patch.shape
        if r < 0 or c < 0 or r + h > rows or c + w > cols:
            raise StructureError(f"patch of shape {patch.shape} at {(r, c)} leaves the {ps.parent_shape} parent")
        total[r:r + h, c:c + w] += patch
        count[r:r + h, c:c + w] += 1
    if np.any(count == 0):
        raise StructureError("patches leave part of the parent uncovered")
    return (total / count).astype(np.float32)


def split_subjects(ids, train_fraction=0.8, seed=0):
    ids = list(ids)
    if not ids:
        raise ConfigError("split_subjects needs at least one subject id")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:], seed)


# --------------------------------------------------------------------------- phantoms

def _smooth_field(rng, shape, sigma):
    noise = rng.standard_normal(shape)
    field_ = ndimage.gaussian_filter(noise, sigma=sigma, mode="wrap")
    field_ -= field_.min()
    return field_ / max(field_.max(), 1e-12)


def _shape_mask(rng, shape, n_shapes):
    slices, rows, cols = shape
    yy, xx = np.mgrid[0:rows, 0:cols]
    mask = np.zeros(shape, dtype=bool)
    for _ in range(n_shapes):
        cy, cx = rng.uniform(0.2, 0.8) * rows, rng.uniform(0.2, 0.8) * cols
        ry, rx = rng.uniform(0.08, 0.22) * rows, rng.uniform(0.08, 0.22) * cols
        if rng.random() < 0.5:
            blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            blob = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        # shapes drift slowly through the slices
        for s in range(slices):
            dy, dx = int(round(0.5 * s)), int(round(0.25 * s))
            mask[s] |= np.roll(blob, (dy, dx), axis=(0, 1))
    return mask


def phantom_target(x1, x2, mask, rule="fusion"):
    """Target rule before renormalisation: mean outside ``mask``, max inside."""
    if rule == "identity":
        return np.array(x1, dtype=np.float64, copy=True)
    if rule != "fusion":
        raise ConfigError(f"unknown phantom rule {rule!r}")
    return np.where(mask, np.maximum(x1, x2), 0.5 * (x1 + x2))


def make_phantom_dataset(n_subjects, size=(128, 128), seed=0, n_slices=4, rule="fusion"):
    """Synthetic subjects whose target needs both sources.

    Returns a list of ``(x1, x2, y)`` :class:`Volume` triplets, each
    normalised to [-1, 1].  ``rule="identity"`` makes ``y`` a copy of
    ``x1`` (a learnable-identity sanity task).
    """
    rows, cols = size
    if n_subjects < 1:
        raise ConfigError("n_subjects must be >= 1")
    if rows < 16 or cols < 16 or n_slices < 1:
        raise ConfigError(f"phantom size must be at least 16x16 with >= 1 slice, got {size} x {n_slices}")
    rng = np.random.default_rng(seed)
    shape = (n_slices, rows, cols)
    sigma = (1.0, rows / 24.0, cols / 24.0)
    out = []
    for k in range(n_subjects):
        sid = f"phantom_{k:03d}"
        mask = _shape_mask(rng, shape, n_shapes=int(rng.integers(2, 5)))
        x1 = _smooth_field(rng, shape, sigma) + 0.6 * mask * _smooth_field(rng, shape, (1.0, 2.0, 2.0))
        x2 = _smooth_field(rng, shape, sigma) + 0.6 * mask * _smooth_field(rng, shape, (1.0, 2.0, 2.0))
        y = phantom_target(x1, x2, mask, rule)
        out.append(tuple(
            normalize_intensity(Volume(sid, m, v))
            for m, v in ((Modality.T1, x1), (Modality.T2, x2), (Modality.synthetic, y))
        ))
    return out


def phantom_samples(triplets, skip_background=False):
    """Flatten phantom triplets into per-slice samples (no cropping/patching)."""
    samples = []
    for v1, v2, vy in triplets:
        for s in range(vy.shape[0]):
            if skip_background and np.all(vy.data[s] == vy.data[s].min()):
                continue
            samples.append(Sample(v1.data[s], v2.data[s], vy.data[s], v1.subject_id, s, (0, 0)))
    return samples


# --------------------------------------------------------------------------- dataset directories

@dataclass
class DatasetIndex:
    """Parsed ``manifest.json`` of a dataset root."""
    root: Path
    subjects: dict = field(default_factory=dict)   # id -> {modality: filename}

    def path(self, subject_id, modality):
        return self.root / subject_id / self.subjects[subject_id][Modality(modality).value]

    def has(self, subject_id, modality):
        return Modality(modality).value in self.subjects.get(subject_id, {})


def write_dataset(root, triplets, modalities=(Modality.T1, Modality.T2, Modality.Flair), ext="hinv"):
    """Lay triplets out as ``<root>/<subject>/<modality>.<ext>`` plus a manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    subjects = {}
    for vols in triplets:
        sid = vols[0].subject_id
        (root / sid).mkdir(exist_ok=True)
        subjects[sid] = {}
        for mod, vol in zip(modalities, vols):
            name = f"{Modality(mod).value}.{ext}"
            save_volume(root / sid / name, vol)
            subjects[sid][Modality(mod).value] = name
    (root / MANIFEST_NAME).write_text(json.dumps({"subjects": subjects}, indent=2))
    return DatasetIndex(root, subjects)


def scan_dataset(root):
    """Read the manifest, or build one by scanning subject directories."""
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if manifest.is_file():
        try:
            subjects = json.loads(manifest.read_text())["subjects"]
        except (ValueError, KeyError) as exc:
            raise FormatError(f"{manifest}: malformed manifest ({exc})") from exc
        return DatasetIndex(root, subjects)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    subjects = {}
    known = {m.value for m in Modality}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        entries = {}
        for f in sorted(sub.iterdir()):
            stem = f.name.split(".", 1)[0]
            if stem in known:
                entries[stem] = f.name
        if entries:
            subjects[sub.name] = entries
    return DatasetIndex(root, subjects)


def write_manifest(root):
    index = scan_dataset(root)
    (Path(root) / MANIFEST_NAME).write_text(json.dumps({"subjects": index.subjects}, indent=2))
    return index


def preprocess_volume(volume, crop=CROP_SHAPE):
    """Normalise then centre-crop every slice."""
    vol = normalize_intensity(volume)
    return Volume(vol.subject_id, vol.modality, center_crop(vol.data, crop), vol.intensity_range)


def patch_samples(index, subject_ids, sources, target, skip_background=False, crop=CROP_SHAPE,
                  size=PATCH_SIZE):
    """Paired patch samples in (subject, slice, anchor) order."""
    samples = []
    for sid in subject_ids:
        vols = [preprocess_volume(load_volume(index.path(sid, m), m, sid), crop)
                for m in (*sources, target)]
        if len({v.shape for v in vols}) != 1:
            raise DimensionError(f"subject {sid}: modality shapes differ {[v.shape for v in vols]}")
        v1, v2, vy = vols
        for s in range(vy.shape[0]):
            if skip_background and np.all(vy.data[s] == vy.data[s].min()):
                continue
            p1 = extract_patches(v1.data[s], size, crop)
            p2 = extract_patches(v2.data[s], size, crop)
            py = extract_patches(vy.data[s], size, crop)
            for a, anchor in enumerate(py.anchors):
                samples.append(Sample(p1.patches[a], p2.patches[a], py.patches[a], sid, s, anchor))
    return samples
