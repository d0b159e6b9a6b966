"""Sample containers, synthetic pseudo-anatomy, PNG corpus I/O and LOOCV splits.

A corpus on disk is two folders of 8-bit grayscale PNGs plus a manifest with
one line per slice::

    volume_id,slice_index,image_file,mask_file

Generated corpora are written in exactly that format (with an additional
``corpus.json`` holding the same-patient map and validation volume), so
synthetic and user data go through the same loader.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, IngestionError

MASK_THRESHOLD = 0.5
DEFAULT_CONTRAST = 0.35
NOISE_STD = 0.05


@dataclass
class SampleBatch:
    """Stack of grayscale images in ``[0, 1]`` with binary masks and grouping labels."""

    images: np.ndarray
    masks: np.ndarray
    volume_ids: list
    slice_indices: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        self.volume_ids = list(self.volume_ids)
        self.slice_indices = np.asarray(self.slice_indices, dtype=np.int64)
        n = len(self.images)
        if not (len(self.masks) == len(self.volume_ids) == len(self.slice_indices) == n):
            raise ValueError("images, masks, volume_ids and slice_indices differ in length")
        if self.images.shape != self.masks.shape:
            raise ValueError(f"image stack {self.images.shape} vs mask stack {self.masks.shape}")
        if n and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("images must lie in [0, 1]")
        if n and self.masks.max() > 1:
            raise ValueError("masks must be binary")

    def __len__(self):
        return len(self.images)

    @property
    def volume_id(self):
        ids = set(self.volume_ids)
        if len(ids) != 1:
            raise ValueError(f"batch spans {len(ids)} volumes")
        return self.volume_ids[0]

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return SampleBatch(
            self.images[index],
            self.masks[index],
            [self.volume_ids[i] for i in index],
            self.slice_indices[index],
        )

    @classmethod
    def concat(cls, batches):
        batches = list(batches)
        if not batches:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([b.images for b in batches]),
            np.concatenate([b.masks for b in batches]),
            [v for b in batches for v in b.volume_ids],
            np.concatenate([b.slice_indices for b in batches]),
        )


# -- synthetic pseudo-anatomy -------------------------------------------------

@dataclass(frozen=True)
class ShapeParams:
    """Ellipse in normalized ``[-1, 1]`` coordinates with a radially perturbed rim.

    A point with ellipse-frame polar coordinates ``(rho, theta)`` lies inside
    when ``rho <= 1 + sum(a_k * cos(k * theta + phi_k))``.
    """

    cx: float
    cy: float
    semi_x: float
    semi_y: float
    angle: float
    harmonics: tuple  # ((order, amplitude, phase), ...)

    def contains(self, x, y):
        dx, dy = np.asarray(x) - self.cx, np.asarray(y) - self.cy
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (c * dx + s * dy) / self.semi_x
        v = (-s * dx + c * dy) / self.semi_y
        rho = np.hypot(u, v)
        theta = np.arctan2(v, u)
        rim = np.ones_like(rho)
        for order, amp, phase in self.harmonics:
            rim = rim + amp * np.cos(order * theta + phase)
        return rho <= rim


def pixel_centers(size):
    """Normalized ``(x, y)`` coordinate grids of pixel centers, each ``(size, size)``."""
    t = (2 * np.arange(size) + 1) / size - 1
    return np.meshgrid(t, t, indexing="xy")


@dataclass
class SyntheticVolume:
    images: np.ndarray
    masks: np.ndarray
    shapes: list = field(default_factory=list)  # per slice: [ShapeParams, ShapeParams]


def _base_anatomy(rng):
    shapes = []
    for side in (-1, 1):
        shapes.append(dict(
            cx=side * 0.42 + rng.uniform(-0.05, 0.05),
            cy=rng.uniform(-0.1, 0.1),
            semi_x=rng.uniform(0.18, 0.26),
            semi_y=rng.uniform(0.26, 0.34),
            angle=side * rng.uniform(0.0, 0.4),
            harmonics=tuple((k, rng.uniform(0.0, 0.08), rng.uniform(0, 2 * np.pi)) for k in (2, 3, 4)),
        ))
    return shapes


def generate_synthetic_volume(seed, n_slices, size, contrast=DEFAULT_CONTRAST, anatomy_seed=None):
    """Pseudo-anatomical volume: two bone-like blobs drifting smoothly across slices.

    ``anatomy_seed`` fixes the base shapes (defaults to ``seed``); volumes that
    share it look like the same patient scanned twice. ``contrast`` is the
    intensity gap between shape interior and background before normalization;
    at 0 the image carries no information about the mask.
    """
    if n_slices < 1:
        raise ConfigError(f"n_slices must be >= 1, got {n_slices}")
    if not isinstance(size, (int, np.integer)) or size < 8:
        raise ConfigError(f"size must be an integer >= 8, got {size!r}")
    if contrast < 0:
        raise ConfigError(f"contrast must be non-negative, got {contrast}")
    anatomy = _base_anatomy(np.random.default_rng(seed if anatomy_seed is None else anatomy_seed))
    rng = np.random.default_rng([seed, 1])
    x, y = pixel_centers(size)

    background = rng.uniform(0.15, 0.25)
    bias = rng.uniform(-1, 1, size=3)
    bias_field = 0.12 * (bias[0] * x + bias[1] * y + bias[2] * x * y)

    images, masks, shapes = [], [], []
    for i in range(n_slices):
        t = i / (n_slices - 1) - 0.5 if n_slices > 1 else 0.0
        slice_shapes = []
        for base in anatomy:
            scale = 1 - 0.6 * t * t + rng.normal(0, 0.01)
            slice_shapes.append(ShapeParams(
                cx=base["cx"] + rng.normal(0, 0.005),
                cy=base["cy"] + 0.12 * t + rng.normal(0, 0.005),
                semi_x=base["semi_x"] * scale,
                semi_y=base["semi_y"] * scale,
                angle=base["angle"] + 0.2 * t,
                harmonics=base["harmonics"],
            ))
        mask = np.zeros((size, size), dtype=bool)
        for sh in slice_shapes:
            mask |= sh.contains(x, y)
        img = background + contrast * mask + bias_field + rng.normal(0, NOISE_STD, size=(size, size))
        images.append(img)
        masks.append(mask)
        shapes.append(slice_shapes)

    images = np.stack(images)
    lo, hi = images.min(), images.max()
    images = (images - lo) / (hi - lo) if hi > lo else np.zeros_like(images)
    return SyntheticVolume(images.astype(np.float32), np.stack(masks).astype(np.uint8), shapes)


def default_volume_ids(n_volumes):
    """``P1, P1post, P2, P2post, P3, ...``; the first two patients get a second scan when there is room."""
    pairs = 2 if n_volumes >= 5 else (1 if n_volumes >= 3 else 0)
    ids, same = [], {}
    patient = 1
    while len(ids) < n_volumes:
        ids.append(f"P{patient}")
        if patient <= pairs and len(ids) < n_volumes:
            ids.append(f"P{patient}post")
            same[f"P{patient}"] = f"P{patient}post"
        patient += 1
    return ids, same


@dataclass
class Corpus:
    volumes: list  # of SampleBatch, one per volume
    same_patient: dict
    val_volume_id: str

    def volume(self, volume_id):
        for v in self.volumes:
            if v.volume_id == volume_id:
                return v
        raise KeyError(volume_id)

    @property
    def volume_ids(self):
        return [v.volume_id for v in self.volumes]


def generate_corpus(n_volumes=7, n_slices=12, size=128, contrast=DEFAULT_CONTRAST, seed=0):
    """Synthetic stand-in for a small multi-patient MRI study.

    The last volume is designated for validation; ``P1``/``P1post`` and
    ``P2``/``P2post`` share anatomy.
    """
    if n_volumes < 1:
        raise ConfigError(f"n_volumes must be >= 1, got {n_volumes}")
    ids, same = default_volume_ids(n_volumes)
    volumes = []
    for index, vid in enumerate(ids):
        anatomy = vid[:-4] if vid.endswith("post") else vid
        anatomy_seed = seed * 1000 + ids.index(anatomy)
        vol = generate_synthetic_volume(seed * 1000 + index, n_slices, size, contrast, anatomy_seed=anatomy_seed)
        volumes.append(SampleBatch(vol.images, vol.masks, [vid] * n_slices, np.arange(n_slices)))
    return Corpus(volumes, same, ids[-1])


def _to_png(array01):
    return Image.fromarray(np.round(np.clip(array01, 0, 1) * 255).astype(np.uint8), mode="L")


def write_corpus(corpus, out_dir):
    """Write ``images/``, ``masks/``, ``manifest.csv`` and ``corpus.json`` under ``out_dir``."""
    image_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(image_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    lines = []
    for vol in corpus.volumes:
        for img, mask, vid, idx in zip(vol.images, vol.masks, vol.volume_ids, vol.slice_indices):
            fname = f"{vid}_{idx:03d}.png"
            _to_png(img).save(os.path.join(image_dir, fname))
            _to_png(mask).save(os.path.join(mask_dir, fname))
            lines.append(f"{vid},{idx},{fname},{fname}")
    with open(os.path.join(out_dir, "manifest.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "corpus.json"), "w") as fh:
        json.dump({"same_patient": corpus.same_patient, "val_volume_id": corpus.val_volume_id}, fh, indent=2)
    return len(lines)


# -- loading -------------------------------------------------------------------

def read_manifest(path):
    """Manifest rows as ``(volume_id, slice_index, image_file, mask_file)`` tuples."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise IngestionError(f"{path}:{lineno}: expected 4 comma-separated fields")
            try:
                rows.append((parts[0], int(parts[1]), parts[2], parts[3]))
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: slice index {parts[1]!r} is not an integer") from None
    return rows


def _open(path):
    if not os.path.isfile(path):
        raise IngestionError(f"missing file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if img.width == 0 or img.height == 0:
        raise IngestionError(f"empty image: {path}")
    return img


def load_image(path, size=None):
    """8-bit grayscale image as float32 in ``[0, 1]``, bilinearly resized to ``size``."""
    img = _open(path).convert("L")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if size is not None and arr.shape != (size, size):
        arr = np.asarray(Image.fromarray(arr, mode="F").resize((size, size), Image.BILINEAR))
    return np.clip(arr, 0, 1).astype(np.float32)


def load_mask(path, size=None, max_ambiguous=0.05):
    """Binary mask from a ``{0,1}`` or ``{0,255}`` PNG, nearest-neighbour resized.

    Raises :class:`IngestionError` when more than ``max_ambiguous`` of the
    pixels sit in the middle band between background and foreground.
    """
    img = _open(path).convert("L")
    raw = np.asarray(img)
    scale = 255.0 if raw.max() > 1 else 1.0
    values = raw / scale
    ambiguous = np.mean((values > 0.25) & (values < 0.75))
    if ambiguous > max_ambiguous:
        raise IngestionError(f"{path}: {ambiguous:.1%} of pixels are neither foreground nor background")
    if size is not None and raw.shape != (size, size):
        values = np.asarray(Image.fromarray(raw).resize((size, size), Image.NEAREST)) / scale
    return (values >= MASK_THRESHOLD).astype(np.uint8)


def load_pairs(image_dir, mask_dir, manifest, size=None):
    """Load every volume listed in ``manifest`` as a :class:`SampleBatch`, in manifest order."""
    rows = read_manifest(manifest)
    if not rows:
        raise IngestionError(f"{manifest}: no slices listed")
    grouped = {}
    for vid, idx, image_file, mask_file in rows:
        img = load_image(os.path.join(image_dir, image_file), size)
        mask = load_mask(os.path.join(mask_dir, mask_file), size)
        if img.shape != mask.shape:
            raise IngestionError(f"{image_file}: image {img.shape} and mask {mask.shape} differ in size")
        grouped.setdefault(vid, []).append((idx, img, mask))
    volumes = []
    for vid, items in grouped.items():
        shapes = {im.shape for _, im, _ in items}
        if len(shapes) != 1:
            raise IngestionError(f"volume {vid}: slices have different sizes {sorted(shapes)}; pass a size")
        volumes.append(SampleBatch(
            np.stack([im for _, im, _ in items]),
            np.stack([m for _, _, m in items]),
            [vid] * len(items),
            [i for i, _, _ in items],
        ))
    return volumes


def load_corpus(data_dir, size=None, same_patient=None, val_volume_id=None):
    """Load a corpus directory written by :func:`write_corpus` (or laid out the same way)."""
    meta_path = os.path.join(data_dir, "corpus.json")
    meta = {}
    if os.path.isfile(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    volumes = load_pairs(
        os.path.join(data_dir, "images"), os.path.join(data_dir, "masks"),
        os.path.join(data_dir, "manifest.csv"), size,
    )
    return Corpus(
        volumes,
        same_patient if same_patient is not None else meta.get("same_patient", {}),
        val_volume_id or meta.get("val_volume_id") or volumes[-1].volume_id,
    )


# -- leave-one-out ------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    test_volume_id: str
    train_volume_ids: tuple
    val_volume_id: str


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple
    same_patient: dict

    def fold(self, test_volume_id):
        for f in self.folds:
            if f.test_volume_id == test_volume_id:
                return f
        raise KeyError(test_volume_id)


def _partners(same_patient_map):
    partners = {}
    for a, bs in (same_patient_map or {}).items():
        for b in [bs] if isinstance(bs, str) else bs:
            partners.setdefault(a, set()).add(b)
            partners.setdefault(b, set()).add(a)
    return partners


def make_loocv_splits(volumes, val_volume_id, same_patient_map=None):
    """One fold per non-validation volume.

    Training volumes are everything except the test volume, the validation
    volume and any scan of the test volume's patient. ``volumes`` may be
    volume ids or :class:`SampleBatch` objects.
    """
    ids = [v if isinstance(v, str) else v.volume_id for v in volumes]
    if len(ids) < 3:
        raise ConfigError(f"leave-one-out needs at least 3 volumes, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate volume ids")
    if val_volume_id not in ids:
        raise ConfigError(f"validation volume {val_volume_id!r} not among {ids}")
    partners = _partners(same_patient_map)
    folds = []
    for test in ids:
        if test == val_volume_id:
            continue
        excluded = {test, val_volume_id} | partners.get(test, set())
        train = tuple(v for v in ids if v not in excluded)
        folds.append(Fold(test, train, val_volume_id))
    return SplitPlan(tuple(folds), {k: sorted(v) for k, v in partners.items()})


def check_fold(plan, test_volume_id):
    """Raise unless ``test_volume_id`` can be a test set under ``plan``."""
    for f in plan.folds:
        if f.test_volume_id == test_volume_id:
            return f
    if plan.folds and test_volume_id == plan.folds[0].val_volume_id:
        raise ConfigError(f"{test_volume_id!r} is the validation volume and cannot be a test fold")
    raise ConfigError(f"no fold with test volume {test_volume_id!r}")


# -- augmentation -------------------------------------------------------------------

def affine_pair(image, mask, angle_deg=0.0, shift=(0.0, 0.0)):
    """Rotate about the image center by ``angle_deg`` then shift by ``(dy, dx)`` pixels.

    The image is resampled bilinearly, the mask by nearest neighbour and
    re-thresholded; pixels pulled from outside the frame become 0.
    """
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask)
    if angle_deg == 0 and shift[0] == 0 and shift[1] == 0:
        return image.copy(), mask.astype(np.uint8)
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    # output -> input mapping: inverse rotation about the center after undoing the shift
    matrix = np.array([[c, s], [-s, c]])
    center = (np.array(image.shape) - 1) / 2.0
    offset = center - matrix @ (center + np.asarray(shift, dtype=float))
    out_img = ndimage.affine_transform(image, matrix, offset, order=1, mode="constant", cval=0.0)
    out_mask = ndimage.affine_transform(mask.astype(np.float32), matrix, offset, order=0, mode="constant", cval=0.0)
    return np.clip(out_img, 0, 1).astype(np.float32), (out_mask >= MASK_THRESHOLD).astype(np.uint8)


def augment(sample, rng, rotation_deg=15.0, translate_frac=0.1):
    """Apply one random rotation + translation identically to an ``(image, mask)`` pair."""
    image, mask = sample
    angle = rng.uniform(-rotation_deg, rotation_deg)
    side = np.asarray(image).shape[-1]
    shift = rng.uniform(-translate_frac, translate_frac, size=2) * side
    return affine_pair(image, mask, angle, tuple(shift))
