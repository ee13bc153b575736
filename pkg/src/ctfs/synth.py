"""Synthetic forward-looking sonar scenes and the on-disk dataset format.

Layout of a dataset directory::

    images/<id>.png          8- or 16-bit grayscale intensity
    masks/<id>.png           8-bit, pixel value = class index
    splits/<ratio>_<seed>.txt   '#labeled' / '#unlabeled' sections
    splits/partition_<seed>.txt '#train' / '#val' / '#test' sections
    meta.txt                 'key = value' lines (num_classes, class_names, ...)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_CLASS_NAMES = ("background", "buoy", "pipe", "crate")


class DatasetError(Exception):
    """Raised for malformed or inconsistent dataset directories."""


@dataclass(frozen=True)
class SceneSpec:
    height: int = 128
    width: int = 128
    num_classes: int = 4
    n_targets: int = 3
    # classes drawn for targets; None means every non-background class
    classes: tuple[int, ...] | None = None
    speckle_looks: float = 3.0
    falloff: float = 0.5
    half_aperture: float = math.radians(60.0)
    shadow_gain: float = 0.12
    target_scale: float = 2.0  # footprint size multiplier at 128 px

    def target_classes(self) -> tuple[int, ...]:
        if self.classes is None:
            return tuple(range(1, self.num_classes))
        return tuple(self.classes)


@dataclass
class SonarScene:
    intensity: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)
    # boolean map of pixels darkened by a cast shadow (generator output only)
    shadow: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape


def _validate_spec(spec: SceneSpec) -> None:
    if spec.height <= 0 or spec.width <= 0:
        raise ValueError(f"scene dimensions must be positive, got {spec.height}x{spec.width}")
    if spec.n_targets < 0:
        raise ValueError("n_targets must be >= 0")
    if spec.target_scale <= 0:
        raise ValueError("target_scale must be positive")
    if spec.num_classes < 2:
        raise ValueError("need at least background plus one target class")
    classes = spec.target_classes()
    if spec.n_targets > 0 and not classes:
        raise ValueError("no target classes to draw from")
    for c in classes:
        if not 0 < c < spec.num_classes:
            raise ValueError(f"target class {c} outside 1..{spec.num_classes - 1}")


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 8) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells)).astype(np.float32)
    img = Image.fromarray(coarse, mode="F").resize((w, h), Image.BICUBIC)
    out = np.asarray(img, dtype=np.float64)
    return out / (np.abs(out).max() + 1e-9)


def _target_footprint(cls: int, xx, yy, cx, cy, rng, scale: float = 1.0):
    """Boolean footprint of one target; shape depends on the class.

    Sizes are in pixels for a 128-pixel frame and multiplied by ``scale``.
    """
    kind = (cls - 1) % 3
    if kind == 0:  # compact round return
        r = scale * rng.uniform(4.0, 7.0)
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    ang = rng.uniform(0.0, math.pi)
    u = (xx - cx) * math.cos(ang) + (yy - cy) * math.sin(ang)
    v = -(xx - cx) * math.sin(ang) + (yy - cy) * math.cos(ang)
    if kind == 1:  # long thin ellipse
        a, b = scale * rng.uniform(10.0, 15.0), scale * rng.uniform(2.5, 4.0)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    half = scale * rng.uniform(4.5, 6.5)  # rotated square
    return (np.abs(u) <= half) & (np.abs(v) <= half)


_CLASS_BRIGHTNESS = (0.95, 0.8, 0.65)


def generate_scene(seed: int, spec: SceneSpec = SceneSpec()) -> SonarScene:
    """Render one synthetic sonar frame with its exact class mask.

    The virtual sensor sits at the top-centre of the image, so range grows with
    the row index. Targets are bright blobs casting a dark sector away from the
    sensor; the whole fan is multiplied by unit-mean gamma speckle.
    """
    _validate_spec(spec)
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx, sy = (w - 1) / 2.0, 0.0
    rng_dist = np.hypot(xx - sx, yy - sy)
    bearing = np.arctan2(xx - sx, yy - sy)
    r_max = 0.97 * (h - 1)
    r_min = 0.06 * h
    fan = (rng_dist <= r_max) & (rng_dist >= r_min) & (np.abs(bearing) <= spec.half_aperture)

    seabed = 0.32 * (1.0 + 0.35 * _smooth_field(rng, h, w))
    falloff = 1.0 - spec.falloff * np.clip(rng_dist / r_max, 0.0, 1.0)
    intensity = seabed * falloff

    mask = np.zeros((h, w), dtype=np.uint8)
    shadow = np.zeros((h, w), dtype=bool)
    classes = spec.target_classes()
    scale = spec.target_scale * min(h, w) / 128.0
    targets = []
    footprints = []
    for _ in range(spec.n_targets):
        cls = int(classes[rng.integers(len(classes))])
        for _attempt in range(20):
            tr = rng.uniform(0.25, 0.7) * r_max
            tb = rng.uniform(-0.75, 0.75) * spec.half_aperture
            cx, cy = sx + tr * math.sin(tb), sy + tr * math.cos(tb)
            foot = _target_footprint(cls, xx, yy, cx, cy, rng, scale) & fan
            if foot.sum() >= 12:
                break
        if not foot.any():
            continue
        b_lo, b_hi = bearing[foot].min(), bearing[foot].max()
        r_far = rng_dist[foot].max()
        length = rng.uniform(15.0, 30.0)
        cast = (
            (bearing >= b_lo) & (bearing <= b_hi)
            & (rng_dist > r_far - 1.0) & (rng_dist <= r_far + length) & fan
        )
        shadow |= cast
        footprints.append((cls, foot))
        targets.append({"class": cls, "x": round(cx, 3), "y": round(cy, 3), "shadow_len": round(length, 3)})

    intensity = np.where(shadow, intensity * spec.shadow_gain, intensity)
    for cls, foot in footprints:
        level = _CLASS_BRIGHTNESS[(cls - 1) % 3] * (0.85 + 0.15 * falloff)
        intensity = np.where(foot, level, intensity)
        mask[foot] = cls
    shadow &= mask == 0

    looks = spec.speckle_looks
    speckle = rng.gamma(shape=looks, scale=1.0 / looks, size=(h, w))
    intensity = np.clip(intensity * speckle, 0.0, 1.0)
    intensity[~fan] = 0.0

    meta = {
        "seed": int(seed),
        "num_classes": spec.num_classes,
        "targets": targets,
        "noise": {"speckle_looks": looks, "falloff": spec.falloff},
    }
    return SonarScene(intensity=intensity, mask=mask, meta=meta, shadow=shadow)


def generate_dataset(n: int, seed: int, spec: SceneSpec = SceneSpec(),
                     min_targets: int = 1, max_targets: int = 4) -> dict[str, SonarScene]:
    """Generate ``n`` scenes with per-scene target counts in [min_targets, max_targets]."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    counts = np.random.default_rng(seed).integers(min_targets, max_targets + 1, size=n)
    scenes = {}
    for i in range(n):
        s = SceneSpec(**{**spec.__dict__, "n_targets": int(counts[i])})
        scenes[f"scene_{i:04d}"] = generate_scene(int(seeds[i]), s)
    return scenes


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class DatasetSplit:
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    ratio: float
    seed: int = 0


@dataclass(frozen=True)
class Partition:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int = 0


def build_splits(ids, ratio: float, seed: int) -> DatasetSplit:
    """Randomly mark ``ratio`` of ``ids`` as labeled, the rest unlabeled."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    ids = sorted(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    n_lab = min(len(ids), max(1, int(round(ratio * len(ids)))))
    perm = np.random.default_rng(seed).permutation(len(ids))
    chosen = set(perm[:n_lab].tolist())
    labeled = [x for i, x in enumerate(ids) if i in chosen]
    unlabeled = [x for i, x in enumerate(ids) if i not in chosen]
    return DatasetSplit(labeled, unlabeled, float(ratio), int(seed))


def build_partition(ids, seed: int, fractions=(0.6, 0.2, 0.2)) -> Partition:
    """Train/val/test partition (6:2:2 by default)."""
    ids = sorted(ids)
    n = len(ids)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    perm = np.random.default_rng(seed).permutation(n)
    val = sorted(ids[i] for i in perm[:n_val])
    test = sorted(ids[i] for i in perm[n_val:n_val + n_test])
    train = sorted(ids[i] for i in perm[n_val + n_test:])
    return Partition(train, val, test, int(seed))


def _write_sections(path: Path, sections: dict[str, list[str]]) -> None:
    lines = []
    for name, ids in sections.items():
        lines.append(f"#{name}")
        lines.extend(ids)
    text = "\n".join(lines) + "\n"
    if path.exists():
        if path.read_text() != text:
            raise FileExistsError(f"{path} already exists with different content; split files are immutable")
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _read_sections(path: Path) -> dict[str, list[str]]:
    if not path.exists():
        raise DatasetError(f"missing split file {path}")
    sections: dict[str, list[str]] = {}
    current = None
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            current = line[1:].strip()
            sections[current] = []
        elif current is None:
            raise DatasetError(f"{path}: id before any section header")
        else:
            sections[current].append(line)
    return sections


def split_path(root, ratio: float, seed: int) -> Path:
    return Path(root) / "splits" / f"{ratio:g}_{seed}.txt"


def partition_path(root, seed: int) -> Path:
    return Path(root) / "splits" / f"partition_{seed}.txt"


def write_split(root, split: DatasetSplit) -> Path:
    path = split_path(root, split.ratio, split.seed)
    _write_sections(path, {"labeled": split.labeled_ids, "unlabeled": split.unlabeled_ids})
    return path


def read_split(root, ratio: float, seed: int) -> DatasetSplit:
    sec = _read_sections(split_path(root, ratio, seed))
    if "labeled" not in sec or "unlabeled" not in sec:
        raise DatasetError("split file needs #labeled and #unlabeled sections")
    if set(sec["labeled"]) & set(sec["unlabeled"]):
        raise DatasetError("labeled and unlabeled ids overlap")
    return DatasetSplit(sec["labeled"], sec["unlabeled"], float(ratio), int(seed))


def write_partition(root, part: Partition) -> Path:
    path = partition_path(root, part.seed)
    _write_sections(path, {"train": part.train, "val": part.val, "test": part.test})
    return path


def read_partition(root, seed: int) -> Partition:
    sec = _read_sections(partition_path(root, seed))
    try:
        return Partition(sec["train"], sec["val"], sec["test"], int(seed))
    except KeyError as exc:
        raise DatasetError(f"partition file lacks section {exc}") from None


# ---------------------------------------------------------------- disk I/O


@dataclass
class SonarDataset:
    root: Path
    num_classes: int
    class_names: list[str]
    images: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]

    @property
    def ids(self) -> list[str]:
        return sorted(self.images)

    def scene(self, sid: str) -> SonarScene:
        if sid not in self.masks:
            raise DatasetError(f"{sid} has no mask")
        return SonarScene(self.images[sid], self.masks[sid], {"id": sid})


def _write_meta(path: Path, meta: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))


def read_meta(root) -> dict[str, str]:
    path = Path(root) / "meta.txt"
    if not path.exists():
        raise DatasetError(f"missing {path}")
    out = {}
    for line in path.read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"bad meta line: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_dataset(scenes: dict[str, SonarScene], root, num_classes: int | None = None,
                 class_names=None, bit_depth: int = 16) -> None:
    """Write scenes as PNG image/mask pairs plus ``meta.txt``."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    if num_classes is None and class_names:
        num_classes = len(class_names)
    if num_classes is None:
        declared = [sc.meta.get("num_classes") for sc in scenes.values()]
        num_classes = max((c for c in declared if c), default=len(DEFAULT_CLASS_NAMES))
    if class_names is None:
        class_names = list(DEFAULT_CLASS_NAMES[:num_classes]) + [
            f"class_{i}" for i in range(len(DEFAULT_CLASS_NAMES), num_classes)]
    scale = 65535 if bit_depth == 16 else 255
    dtype = np.uint16 if bit_depth == 16 else np.uint8
    shape = None
    for sid, sc in scenes.items():
        if sc.intensity.shape != sc.mask.shape:
            raise DatasetError(f"{sid}: image/mask shape mismatch")
        if sc.mask.max(initial=0) >= num_classes:
            raise DatasetError(f"{sid}: class index >= {num_classes}")
        shape = sc.intensity.shape
        arr = np.round(np.clip(sc.intensity, 0.0, 1.0) * scale).astype(dtype)
        Image.fromarray(arr).save(root / "images" / f"{sid}.png")
        Image.fromarray(sc.mask.astype(np.uint8)).save(root / "masks" / f"{sid}.png")
    meta = {"num_classes": num_classes, "class_names": ",".join(class_names), "bit_depth": bit_depth}
    if shape is not None:
        meta["height"], meta["width"] = shape
    _write_meta(root / "meta.txt", meta)


def _read_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected single-channel image")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32):
        return arr.astype(np.float64) / 65535.0
    raise DatasetError(f"{path}: unsupported pixel type {arr.dtype}")


def load_dataset(root, require_masks=None) -> SonarDataset:
    """Load a dataset directory.

    Every id named in a ``#labeled`` section of any split file (plus any id in
    ``require_masks``) must have a mask; masks are checked against the image
    shape and the declared class count.
    """
    root = Path(root)
    meta = read_meta(root)
    try:
        num_classes = int(meta["num_classes"])
    except (KeyError, ValueError):
        raise DatasetError("meta.txt must define an integer num_classes") from None
    names = [s.strip() for s in meta.get("class_names", "").split(",") if s.strip()]
    if len(names) != num_classes:
        names = [f"class_{i}" for i in range(num_classes)]
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise DatasetError(f"missing {img_dir}")

    required = set(require_masks or ())
    split_dir = root / "splits"
    if split_dir.is_dir():
        for f in split_dir.glob("*.txt"):
            if f.name.startswith("partition_"):
                continue
            required.update(_read_sections(f).get("labeled", []))

    images, masks = {}, {}
    for p in sorted(img_dir.glob("*.png")):
        images[p.stem] = _read_image(p)
    for sid in sorted(required):
        if sid not in images:
            raise DatasetError(f"split references unknown image {sid}")
    for sid, img in images.items():
        mp = mask_dir / f"{sid}.png"
        if not mp.exists():
            if sid in required:
                raise DatasetError(f"labeled image {sid} has no mask")
            continue
        m = np.asarray(Image.open(mp))
        if m.shape != img.shape:
            raise DatasetError(f"{sid}: mask shape {m.shape} != image shape {img.shape}")
        if m.max(initial=0) >= num_classes:
            raise DatasetError(f"{sid}: mask holds class {m.max()} >= {num_classes}")
        masks[sid] = m.astype(np.uint8)
    return SonarDataset(root, num_classes, names, images, masks)
