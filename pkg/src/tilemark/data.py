"""Datasets on disk, paired image/mask augmentation, and synthetic drainage scenes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, ManifestError, ShapeError


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8 in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ShapeError(
                f"sample {self.id!r}: image {self.image.shape[:2]} vs mask {self.mask.shape}"
            )


# ---------------------------------------------------------------- disk layout

def _read_ids(root: Path) -> list[str]:
    manifest = root / "manifest.txt"
    if manifest.exists():
        ids = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    else:
        ids = [p.stem for p in (root / "images").glob("*.png")]
    return sorted(ids)


def load_dataset(directory) -> list[Sample]:
    """Read ``images/<id>.png`` and ``masks/<id>.png``; masks binarized at >= 128."""
    root = Path(directory)
    if not (root / "images").is_dir() or not (root / "masks").is_dir():
        raise ManifestError(f"{root} needs images/ and masks/ subdirectories")
    ids = _read_ids(root)
    mask_ids = {p.stem for p in (root / "masks").glob("*.png")}
    missing = [i for i in ids if i not in mask_ids or not (root / "images" / f"{i}.png").exists()]
    if missing:
        raise ManifestError(f"missing image or mask for ids: {', '.join(missing)}")
    samples = []
    for i in ids:
        image = np.asarray(Image.open(root / "images" / f"{i}.png").convert("RGB"))
        mask = np.asarray(Image.open(root / "masks" / f"{i}.png").convert("L"))
        samples.append(Sample(image, (mask >= 128).astype(np.uint8), i))
    return samples


def save_dataset(samples, directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(s.image).save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask * 255).astype(np.uint8)).save(root / "masks" / f"{s.id}.png")
    (root / "manifest.txt").write_text("".join(f"{s.id}\n" for s in samples))


# ---------------------------------------------------------------- augmentation

ROTATION_RANGE = 30.0
BRIGHTNESS_RANGE = 0.3
ZOOM_RANGE = (0.8, 1.2)


@dataclass(frozen=True)
class HFlip:
    pass


@dataclass(frozen=True)
class VFlip:
    pass


@dataclass(frozen=True)
class Rotate:
    degrees: float  # counter-clockwise


@dataclass(frozen=True)
class Brightness:
    delta: float  # fraction of full scale added to every channel

    def __post_init__(self):
        if not -BRIGHTNESS_RANGE <= self.delta <= BRIGHTNESS_RANGE:
            raise ConfigurationError(f"brightness delta {self.delta} outside +/-{BRIGHTNESS_RANGE}")


@dataclass(frozen=True)
class Zoom:
    scale: float  # > 1 magnifies about the centre

    def __post_init__(self):
        if not ZOOM_RANGE[0] <= self.scale <= ZOOM_RANGE[1]:
            raise ConfigurationError(f"zoom {self.scale} outside {ZOOM_RANGE}")


@dataclass(frozen=True)
class Compose:
    ops: tuple = field(default_factory=tuple)


def _warp(sample: Sample, matrix: np.ndarray) -> Sample:
    """Resample with output->input affine ``matrix`` (2x2) about the image centre.

    Image: bilinear with mean-colour fill. Mask: nearest with zero fill.
    """
    h, w = sample.mask.shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    img = sample.image.astype(np.float64)
    fill = img.reshape(-1, img.shape[2]).mean(axis=0)
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            img[:, :, c], matrix, offset=offset, order=1, mode="constant", cval=fill[c]
        )
    mask = ndimage.affine_transform(
        sample.mask, matrix, offset=offset, order=0, mode="constant", cval=0
    )
    image = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return Sample(image, mask.astype(np.uint8), sample.id)


def _copy(sample: Sample) -> Sample:
    return Sample(sample.image.copy(), sample.mask.copy(), sample.id)


def augment(sample: Sample, op) -> Sample:
    """Apply one op (or a Compose) to image and mask with identical geometry."""
    if isinstance(op, HFlip):
        return Sample(sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.id)
    if isinstance(op, VFlip):
        return Sample(sample.image[::-1].copy(), sample.mask[::-1].copy(), sample.id)
    if isinstance(op, Rotate):
        # (row, col) coordinates with rows pointing down; maps output pixels back into the input
        t = math.radians(op.degrees)
        c, s = math.cos(t), math.sin(t)
        return _warp(sample, np.array([[c, s], [-s, c]]))
    if isinstance(op, Zoom):
        return _warp(sample, np.eye(2) / op.scale)
    if isinstance(op, Brightness):
        if op.delta == 0:
            return _copy(sample)
        image = np.clip(np.rint(sample.image.astype(np.float64) + op.delta * 255.0), 0, 255)
        return Sample(image.astype(np.uint8), sample.mask.copy(), sample.id)
    if isinstance(op, Compose):
        out = _copy(sample)
        for inner in op.ops:
            out = augment(out, inner)
        return out
    raise ConfigurationError(f"unknown augmentation {op!r}")


def random_augmentation(rng: np.random.Generator) -> Compose:
    ops = []
    if rng.random() < 0.5:
        ops.append(HFlip())
    if rng.random() < 0.5:
        ops.append(VFlip())
    ops.append(Rotate(float(rng.uniform(-ROTATION_RANGE, ROTATION_RANGE))))
    ops.append(Zoom(float(rng.uniform(*ZOOM_RANGE))))
    ops.append(Brightness(float(rng.uniform(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE))))
    return Compose(tuple(ops))


FIXED_VARIANTS = (Compose(), HFlip(), VFlip(), Compose((HFlip(), VFlip())))


def variant_op(seed: int, index: int, variant: int):
    if variant < len(FIXED_VARIANTS):
        return FIXED_VARIANTS[variant]
    return random_augmentation(np.random.default_rng([seed, index, variant]))


def expand_training_set(samples, factor: int = 12, seed: int = 0) -> list[Sample]:
    """Each sample -> original, hflip, vflip, both, then seeded random composites.

    256 samples with the default factor give the 3072-image training set.
    """
    if factor < 1:
        raise ConfigurationError("expansion factor must be >= 1")
    out = []
    for i, s in enumerate(samples):
        for v in range(factor):
            aug = augment(s, variant_op(seed, i, v))
            aug.id = s.id if v == 0 else f"{s.id}_aug{v:02d}"
            out.append(aug)
    return out


# ---------------------------------------------------------------- synthetic scenes

SOIL_RGB = np.array([112.0, 92.0, 70.0])


@dataclass
class SynthSceneConfig:
    size: int = 64
    pattern: str = "parallel"  # parallel | herringbone
    line_spacing: float = 16.0
    line_width: float = 2.0
    orientation: float = 0.0  # degrees; 0 = lines along the image rows
    line_brightness_gain: float = 0.3
    background_noise_scale: float = 12.0
    n_confounder_roads: int = 1
    seed: int = 0
    phase: float | None = None  # line offset; drawn from the seed when None

    def __post_init__(self):
        if self.pattern not in ("parallel", "herringbone"):
            raise ConfigurationError(f"unknown pattern {self.pattern!r}")
        if not self.line_spacing > self.line_width >= 1:
            raise ConfigurationError("need line_spacing > line_width >= 1")
        if self.size < 16 or self.size % 16:
            raise ConfigurationError(f"size {self.size} must be a positive multiple of 16")


def line_geometry(config: SynthSceneConfig, phase: float) -> list[tuple[np.ndarray, float, int]]:
    """Line families as (unit normal, offset of line 0, side) in (row, col) coordinates.

    A pixel centre p lies on a family if (p - centre) . normal is within half a
    line width of ``offset + k * spacing`` for some integer k. ``side`` restricts
    the family to one half-plane of the main drain (0 = everywhere).
    """
    t = math.radians(config.orientation)
    along = np.array([math.sin(-t), math.cos(t)])  # direction of the drains
    normal = np.array([math.cos(t), math.sin(t)])
    if config.pattern == "parallel":
        return [(normal, phase, 0)]
    a = math.radians(45.0)
    lateral_pos = -math.sin(a) * along + math.cos(a) * normal
    lateral_neg = -math.sin(a) * along - math.cos(a) * normal
    return [
        (normal, 0.0, 0),  # main drain through the centre; not periodic
        (lateral_pos, phase, 1),
        (lateral_neg, phase, -1),
    ]


def rasterize_lines(config: SynthSceneConfig, phase: float) -> np.ndarray:
    n = config.size
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    centre = (n - 1) / 2.0
    pts = np.stack([rows - centre, cols - centre], axis=-1)
    half = config.line_width / 2.0
    families = line_geometry(config, phase)
    mask = np.zeros((n, n), dtype=bool)
    main_normal = families[0][0]
    side_coord = pts @ main_normal
    for k, (normal, offset, side) in enumerate(families):
        d = pts @ normal - offset
        if config.pattern == "herringbone" and k == 0:
            on = np.abs(d) < half
        else:
            r = d - config.line_spacing * np.round(d / config.line_spacing)
            on = (r >= -half) & (r < half)
        if side:
            on &= side * side_coord > 0
        mask |= on
    return mask


def _draw_roads(rng, n: int, count: int) -> np.ndarray:
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    roads = np.zeros((n, n), dtype=bool)
    for _ in range(count):
        t = rng.uniform(0, math.pi)
        c = rng.uniform(0.2 * n, 0.8 * n)
        width = rng.uniform(3.0, 5.0)
        d = (rows - n / 2) * math.cos(t) + (cols - n / 2) * math.sin(t) + n / 2 - c
        roads |= np.abs(d) < width / 2
    return roads


def generate_synthetic_scene(config: SynthSceneConfig, id: str = "") -> Sample:
    """Soil-toned noise with bright drainage lines and darker confounder roads.

    Roads are not drains and never appear in the mask.
    """
    rng = np.random.default_rng(config.seed)
    n = config.size
    phase = config.phase if config.phase is not None else float(rng.uniform(0, config.line_spacing))
    noise = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=2.0)
    noise /= noise.std() or 1.0
    image = SOIL_RGB[None, None, :] + config.background_noise_scale * noise[:, :, None]
    image = image + rng.normal(0, 2.0, size=(n, n, 3))

    mask = rasterize_lines(config, phase)
    image[mask] += config.line_brightness_gain * 255.0
    roads = _draw_roads(rng, n, config.n_confounder_roads)
    image[roads] = 0.55 * image[roads]

    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return Sample(image, mask.astype(np.uint8), id or f"scene{config.seed:05d}")


def synth_dataset(count: int, base: SynthSceneConfig, seed: int = 0, randomize: bool = True) -> list[Sample]:
    """``count`` scenes; per-scene seeds, and when ``randomize`` also orientation/spacing jitter."""
    out = []
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        cfg = replace(base, seed=int(rng.integers(2**31)))
        if randomize:
            cfg = replace(
                cfg,
                orientation=float(rng.uniform(0, 180)),
                line_spacing=float(base.line_spacing * rng.uniform(0.8, 1.25)),
            )
        out.append(generate_synthetic_scene(cfg, id=f"s{seed:03d}_{k:05d}"))
    return out
