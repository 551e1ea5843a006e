"""Synthetic segmentation data: generation, splitting, augmentation, disk I/O.

Images are single-channel square float64 arrays containing one to a few
elliptical "lesions" on a flat background, plus optional per-pixel texture
noise and small bright distractor spots that belong to the background.  Masks
are {0,1} integer maps of the ellipse union.  Every stage is a pure function
of its seed; image i depends only on (seed, i), so generating a prefix of a
dataset yields the same images.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, CorruptFileError, ShapeError

_SUPERSAMPLE = 4  # boundary coverage resolution: 4x4 subsamples per pixel
_MAX_ATTEMPTS = 1000

# an image is regenerated until its mask covers this fraction band
MIN_COVERAGE = 0.05
MAX_COVERAGE = 0.60


@dataclass(frozen=True)
class GenSpec:
    num_images: int = 200
    image_size: int = 32
    min_shapes: int = 1
    max_shapes: int = 3
    bg_mean: float = 0.2
    bg_std: float = 0.05
    fg_mean: float = 0.75
    fg_std: float = 0.1
    texture_sigma: float = 0.15
    distractor_count: int = 4
    antialias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ConfigError(f"num_images must be >= 1, got {self.num_images}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError(f"need 1 <= min_shapes <= max_shapes, got "
                              f"{self.min_shapes}..{self.max_shapes}")
        for name in ("bg_std", "fg_std", "texture_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.distractor_count < 0:
            raise ConfigError(f"distractor_count must be >= 0, got {self.distractor_count}")


class LabeledExample(NamedTuple):
    id: str
    image: np.ndarray
    mask: np.ndarray


class UnlabeledExample(NamedTuple):
    id: str
    image: np.ndarray


@dataclass(eq=False)
class SemiDataset:
    """Split pools for semi-supervised training.

    Unlabeled examples carry no mask; the masks withheld from them live only
    in ``unlabeled_masks_diag`` for diagnostics and are never saved to disk.
    """

    labeled: list
    unlabeled: list
    validation: list
    image_size: int
    provenance: dict
    unlabeled_masks_diag: list = field(default_factory=list, repr=False)


def _coverage(size: int, discs) -> np.ndarray:
    """Subsampled area fraction of a union of rotated ellipses per pixel.

    ``discs`` is an iterable of (cy, cx, ry, rx, theta) in pixel units.
    """
    ss = _SUPERSAMPLE
    pos = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(pos, pos, indexing="ij")
    inside = np.zeros((size * ss, size * ss), dtype=bool)
    for cy, cx, ry, rx, theta in discs:
        dy, dx = yy - cy, xx - cx
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        u = dy * cos_t + dx * sin_t
        v = -dy * sin_t + dx * cos_t
        inside |= (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _generate_one(spec: GenSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    size = spec.image_size

    for _ in range(_MAX_ATTEMPTS):
        bg = spec.bg_mean + spec.bg_std * rng.standard_normal()
        fg = spec.fg_mean + spec.fg_std * rng.standard_normal()
        n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        shapes = []
        for _ in range(n_shapes):
            cy, cx = rng.uniform(0.25 * size, 0.75 * size, 2)
            ry, rx = rng.uniform(0.10 * size, 0.30 * size, 2)
            theta = rng.uniform(0.0, np.pi)
            shapes.append((cy, cx, ry, rx, theta))
        if fg - bg < 0.05:
            continue  # keep the lesion brighter than the background
        cov = _coverage(size, shapes)
        mask = cov >= 0.5
        fraction = mask.mean()
        if MIN_COVERAGE <= fraction <= MAX_COVERAGE:
            break
    else:
        raise ConfigError(f"could not draw a mask with coverage in "
                          f"[{MIN_COVERAGE}, {MAX_COVERAGE}] for image {index}")

    profile = cov if spec.antialias else mask.astype(np.float64)
    image = bg + profile * (fg - bg)
    if spec.texture_sigma > 0:
        image = image + rng.normal(0.0, spec.texture_sigma, image.shape)
    for _ in range(spec.distractor_count):
        dy, dx = rng.uniform(0, size, 2)
        radius = rng.uniform(0.5, 1.5)
        bump = rng.uniform(0.8, 1.2) * (fg - bg)
        image = image + bump * _coverage(size, [(dy, dx, radius, radius, 0.0)])

    std = image.std()
    if std < 1e-8:
        raise ConfigError(f"degenerate flat image {index}")
    image = (image - image.mean()) / std
    return image, mask.astype(np.int64)


def generate(spec: GenSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """All (image, mask) pairs described by ``spec``, index-deterministic."""
    return [_generate_one(spec, i) for i in range(spec.num_images)]


def _id_for(index: int, total: int) -> str:
    width = max(3, len(str(total - 1)))
    return f"img{index:0{width}d}"


def _half_up(x: float) -> int:
    return int(x + 0.5)


def split(pairs, labeled_fraction: float, val_fraction: float, seed,
          provenance: dict | None = None) -> SemiDataset:
    """Deterministic shuffled split into labeled / unlabeled / validation.

    With a fixed seed, validation membership does not depend on
    labeled_fraction, and smaller labeled pools are subsets of larger ones.
    labeled_fraction == 1.0 means every non-validation image is labeled.
    """
    n = len(pairs)
    if n < 2:
        raise ConfigError(f"need at least 2 images to split, got {n}")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ConfigError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")

    val_count = _half_up(n * val_fraction)
    if val_count < 1 or val_count >= n:
        raise ConfigError(f"degenerate validation pool: {val_count} of {n}")
    if labeled_fraction == 1.0:
        labeled_count = n - val_count
    else:
        labeled_count = min(_half_up(n * labeled_fraction), n - val_count)
    if labeled_count < 1:
        raise ConfigError(f"degenerate labeled pool: {labeled_count} of {n}")

    perm = np.random.default_rng(seed).permutation(n)
    val_idx = sorted(int(i) for i in perm[:val_count])
    lab_idx = sorted(int(i) for i in perm[val_count : val_count + labeled_count])
    unl_idx = sorted(int(i) for i in perm[val_count + labeled_count :])

    size = int(np.asarray(pairs[0][0]).shape[0])
    ds = SemiDataset(labeled=[], unlabeled=[], validation=[], image_size=size,
                     provenance=dict(provenance or {}))
    for i in lab_idx:
        image, mask = pairs[i]
        ds.labeled.append(LabeledExample(_id_for(i, n), image, mask))
    for i in unl_idx:
        image, mask = pairs[i]
        ds.unlabeled.append(UnlabeledExample(_id_for(i, n), image))
        ds.unlabeled_masks_diag.append(mask)
    for i in val_idx:
        image, mask = pairs[i]
        ds.validation.append(LabeledExample(_id_for(i, n), image, mask))
    return ds


# ---------------------------------------------------------------------------
# augmentation


def _resize_bilinear(img: np.ndarray, out_size: int) -> np.ndarray:
    size = img.shape[0]
    coords = (np.arange(out_size) + 0.5) * (size / out_size) - 0.5
    c0 = np.clip(np.floor(coords), 0, size - 1).astype(np.int64)
    c1 = np.clip(c0 + 1, 0, size - 1)
    w = np.clip(coords - c0, 0.0, 1.0)
    top = img[np.ix_(c0, c0)] * (1 - w)[None, :] + img[np.ix_(c0, c1)] * w[None, :]
    bot = img[np.ix_(c1, c0)] * (1 - w)[None, :] + img[np.ix_(c1, c1)] * w[None, :]
    return top * (1 - w)[:, None] + bot * w[:, None]


def _recrop(arr: np.ndarray, size: int, pad_value) -> np.ndarray:
    m = arr.shape[0]
    if m == size:
        return arr
    if m > size:
        start = (m - size) // 2
        return arr[start : start + size, start : start + size]
    before = (size - m) // 2
    after = size - m - before
    return np.pad(arr, ((before, after), (before, after)), constant_values=pad_value)


def augment(image: np.ndarray, mask: np.ndarray | None, rng: np.random.Generator):
    """Random square symmetry plus scale jitter in [0.9, 1.1], applied
    identically to image and mask (mask may be None for unlabeled samples).

    The scaled image is bilinearly resampled and center-cropped or zero-padded
    back to its original extent.  Masks go through the same resampler and are
    re-binarized at 0.5, so they stay {0,1} and agree with a thresholded
    image warp pixel for pixel.
    """
    from . import transforms as tf

    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ShapeError(f"augment needs a square 2-d image, got shape {image.shape}")
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != image.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match image {image.shape}")

    quarter_turns = int(rng.integers(4))
    flip = int(rng.integers(2))
    op = tf.TransformOp((flip, quarter_turns))
    image = tf.apply(op, image)
    if mask is not None:
        mask = tf.apply(op, mask)

    size = image.shape[0]
    scale = float(rng.uniform(0.9, 1.1))
    scaled = _half_up(size * scale)
    if scaled != size and scaled >= 2:
        image = _recrop(_resize_bilinear(image, scaled), size, 0.0)
        if mask is not None:
            soft = _resize_bilinear(mask.astype(np.float64), scaled)
            mask = _recrop((soft >= 0.5).astype(np.int64), size, 0)
    return image, mask


# ---------------------------------------------------------------------------
# disk format


def _provenance_from(spec: GenSpec, labeled_fraction, val_fraction, split_seed) -> dict:
    prov = {}
    for f in dataclasses.fields(GenSpec):
        value = getattr(spec, f.name)
        if isinstance(value, bool):
            prov[f.name] = "true" if value else "false"
        elif isinstance(value, float):
            prov[f.name] = repr(float(value))
        else:
            prov[f.name] = str(value)
    prov["labeled_fraction"] = repr(float(labeled_fraction))
    prov["val_fraction"] = repr(float(val_fraction))
    prov["split_seed"] = str(int(split_seed))
    return prov


def genspec_from_provenance(provenance: dict) -> GenSpec:
    kwargs = {}
    for f in dataclasses.fields(GenSpec):
        if f.name not in provenance:
            raise ConfigError(f"provenance is missing generator field {f.name!r}")
        raw = provenance[f.name]
        if f.type == "bool" or isinstance(f.default, bool):
            if raw not in ("true", "false"):
                raise ConfigError(f"provenance field {f.name!r} must be true/false, got {raw!r}")
            kwargs[f.name] = raw == "true"
        elif isinstance(f.default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return GenSpec(**kwargs)


def build_dataset(spec: GenSpec, labeled_fraction: float, val_fraction: float,
                  split_seed) -> SemiDataset:
    """Generate and split in one call, recording full provenance."""
    pairs = generate(spec)
    prov = _provenance_from(spec, labeled_fraction, val_fraction, split_seed)
    return split(pairs, labeled_fraction, val_fraction, split_seed, provenance=prov)


def save_dataset(dataset: SemiDataset, directory) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)

    rows = []
    for ex in dataset.labeled:
        rows.append((ex.id, "labeled", ex.image, ex.mask))
    for ex in dataset.unlabeled:
        rows.append((ex.id, "unlabeled", ex.image, None))
    for ex in dataset.validation:
        rows.append((ex.id, "validation", ex.image, ex.mask))

    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "role", "image_path", "mask_path"])
        for img_id, role, image, mask in rows:
            image_path = f"images/{img_id}.tcsm"
            save_tensors(directory / image_path, {"image": image})
            mask_path = ""
            if mask is not None:
                mask_path = f"masks/{img_id}.tcsm"
                save_tensors(directory / mask_path, {"mask": mask.astype(np.float64)})
            writer.writerow([img_id, role, image_path, mask_path])

    with open(directory / "provenance.txt", "w") as fh:
        for key in sorted(dataset.provenance):
            fh.write(f"{key}={dataset.provenance[key]}\n")


def _load_single(path: Path, expected_name: str) -> np.ndarray:
    tensors = load_tensors(path)
    if list(tensors) != [expected_name]:
        raise CorruptFileError(f"{path}: expected a single {expected_name!r} tensor, "
                               f"got {list(tensors)}")
    return tensors[expected_name].data


def load_dataset(directory) -> SemiDataset:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.is_file():
        raise CorruptFileError(f"{manifest}: missing manifest")
    prov_file = directory / "provenance.txt"
    if not prov_file.is_file():
        raise CorruptFileError(f"{prov_file}: missing provenance")
    provenance = {}
    for line_no, line in enumerate(prov_file.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise CorruptFileError(f"{prov_file}:{line_no}: expected key=value")
        key, _, value = line.partition("=")
        provenance[key.strip()] = value.strip()

    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "role", "image_path", "mask_path"]:
            raise CorruptFileError(f"{manifest}: unexpected header {header}")
        entries = list(reader)

    ds = SemiDataset(labeled=[], unlabeled=[], validation=[], image_size=0,
                     provenance=provenance)
    seen = set()
    for row in entries:
        if len(row) != 4:
            raise CorruptFileError(f"{manifest}: malformed row {row}")
        img_id, role, image_path, mask_path = row
        if img_id in seen:
            raise CorruptFileError(f"{manifest}: duplicate id {img_id!r}")
        seen.add(img_id)
        image = _load_single(directory / image_path, "image")
        if image.ndim != 2 or image.shape[0] != image.shape[1]:
            raise CorruptFileError(f"{image_path}: image must be square 2-d, "
                                   f"got shape {image.shape}")
        if ds.image_size == 0:
            ds.image_size = int(image.shape[0])
        elif image.shape[0] != ds.image_size:
            raise CorruptFileError(f"{image_path}: size {image.shape[0]} differs from "
                                   f"{ds.image_size}")
        if role == "unlabeled":
            if mask_path:
                raise CorruptFileError(f"{manifest}: unlabeled {img_id!r} has a mask path")
            ds.unlabeled.append(UnlabeledExample(img_id, image))
            continue
        if role not in ("labeled", "validation"):
            raise CorruptFileError(f"{manifest}: unknown role {role!r}")
        if not mask_path:
            raise CorruptFileError(f"{manifest}: {role} {img_id!r} is missing a mask path")
        raw_mask = _load_single(directory / mask_path, "mask")
        if raw_mask.shape != image.shape:
            raise CorruptFileError(f"{mask_path}: mask shape {raw_mask.shape} does not "
                                   f"match image {image.shape}")
        if not np.isin(raw_mask, (0.0, 1.0)).all():
            raise CorruptFileError(f"{mask_path}: mask values must be 0 or 1")
        example = LabeledExample(img_id, image, raw_mask.astype(np.int64))
        (ds.labeled if role == "labeled" else ds.validation).append(example)

    if ds.image_size == 0:
        raise CorruptFileError(f"{manifest}: no images listed")
    return ds


def datasets_equal(a: SemiDataset, b: SemiDataset, check_provenance: bool = True) -> bool:
    """Bit-exact equality of the trainer-visible parts (diagnostics ignored)."""
    if a.image_size != b.image_size:
        return False
    if check_provenance and a.provenance != b.provenance:
        return False
    for pool in ("labeled", "validation"):
        pa, pb = getattr(a, pool), getattr(b, pool)
        if len(pa) != len(pb):
            return False
        for xa, xb in zip(pa, pb):
            if xa.id != xb.id or not np.array_equal(xa.image, xb.image) \
                    or not np.array_equal(xa.mask, xb.mask):
                return False
    if len(a.unlabeled) != len(b.unlabeled):
        return False
    for xa, xb in zip(a.unlabeled, b.unlabeled):
        if xa.id != xb.id or not np.array_equal(xa.image, xb.image):
            return False
    return True
