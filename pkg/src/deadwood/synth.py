"""Synthetic scene generation by cut-paste composition.

Foreground cut-outs (RGBA, alpha as instance mask) are scaled, rotated
and lightness-adjusted, then pasted onto backgrounds in placement
order (painter's algorithm), so the topmost opaque pixel owns each
location and instance masks are disjoint by construction. Every output
is a pure function of the recipe or master seed: re-runs are
byte-identical.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .coco_io import (
    CocoAnnotation,
    CocoCategory,
    CocoDataset,
    CocoImage,
    annotation_from_mask,
    segmentation_to_mask,
    write_coco,
)
from .geom import InstanceMask

OCCLUSION_POLICIES = ("keep", "drop_fragmented", "split_components")

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class ForegroundInstance:
    """A tight-cropped RGBA cut-out; alpha >= 128 counts as opaque."""

    image: np.ndarray  # (h, w, 4) uint8
    category_id: int
    source_id: str

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 4 or self.image.dtype != np.uint8:
            raise ValueError(f"{self.source_id}: foreground must be uint8 RGBA")
        if not (self.image[:, :, 3] >= 128).any():
            raise ValueError(f"{self.source_id}: foreground alpha is empty")


@dataclass
class ForegroundLibrary:
    instances: list[ForegroundInstance]
    categories: list[CocoCategory]


@dataclass(frozen=True)
class Placement:
    """One pasted instance: x/y is the top-left pixel of the transformed cut-out."""

    foreground_id: int
    scale: float
    rotation_deg: float
    lightness: float
    x: int
    y: int

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class SceneRecipe:
    background_id: int
    placements: tuple[Placement, ...]
    seed: int = 0


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation recipe: exact right-angle rotations and flips, mild photometrics.

    Geometric transforms apply identically to image, masks and boxes;
    brightness/contrast touch the image only. Corner clipping crops a
    random corner by at most ``corner_clip_max_frac`` of each dimension
    and drops instances whose visible area falls below ``min_area``.
    """

    rotations: tuple[int, ...] = (0, 90, 180, 270)
    brightness: tuple[float, float] = (0.9, 1.1)
    contrast: tuple[float, float] = (0.9, 1.1)
    hflip_prob: float = 0.5
    corner_clip_prob: float = 0.25
    corner_clip_max_frac: float = 0.1
    min_area: int = 25

    def __post_init__(self) -> None:
        if any(r % 90 for r in self.rotations):
            raise ValueError(f"rotations must be multiples of 90, got {self.rotations}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotations=(0,), brightness=(1.0, 1.0), contrast=(1.0, 1.0),
                   hflip_prob=0.0, corner_clip_prob=0.0)


@dataclass
class SynthConfig:
    """Distributions for random recipes plus post-compose processing."""

    placements_per_scene: tuple[int, int] = (1, 8)
    scale_range: tuple[float, float] = (0.5, 1.5)
    rotation_range: tuple[float, float] = (0.0, 360.0)
    lightness_range: tuple[float, float] = (0.9, 1.1)
    occlusion: str = "keep"
    min_area: int = 25
    augment: Optional[AugmentConfig] = None
    file_prefix: str = "scene"

    def __post_init__(self) -> None:
        if self.occlusion not in OCCLUSION_POLICIES:
            raise ValueError(f"occlusion must be one of {OCCLUSION_POLICIES}, got {self.occlusion!r}")


# ---------------------------------------------------------------------------
# Libraries
# ---------------------------------------------------------------------------

def tight_crop(rgba: np.ndarray) -> np.ndarray:
    """Drop fully transparent border rows/columns (alpha < 128 everywhere)."""
    opaque = rgba[:, :, 3] >= 128
    rows = np.flatnonzero(opaque.any(axis=1))
    cols = np.flatnonzero(opaque.any(axis=0))
    if rows.size == 0:
        raise ValueError("cut-out has no opaque pixels")
    return rgba[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def load_foregrounds(directory: Union[str, Path]) -> ForegroundLibrary:
    """Load RGBA PNG cut-outs; subdirectories become categories.

    A flat directory yields a single category named "object". Files are
    visited in sorted order so instance ids are stable.
    """
    directory = Path(directory)
    subdirs = sorted(p for p in directory.iterdir() if p.is_dir())
    groups: list[tuple[int, str, list[Path]]]
    if subdirs:
        groups = [(i + 1, sub.name, sorted(sub.glob("*.png"))) for i, sub in enumerate(subdirs)]
    else:
        groups = [(1, "object", sorted(directory.glob("*.png")))]
    instances = []
    categories = []
    for cat_id, name, paths in groups:
        categories.append(CocoCategory(id=cat_id, name=name))
        for path in paths:
            with Image.open(path) as im:
                rgba = np.asarray(im.convert("RGBA"))
            instances.append(ForegroundInstance(
                image=tight_crop(rgba),
                category_id=cat_id,
                source_id=str(path.relative_to(directory)),
            ))
    if not instances:
        raise ValueError(f"{directory}: no foreground PNGs found")
    return ForegroundLibrary(instances=instances, categories=categories)


def load_backgrounds(directory: Union[str, Path]) -> list[np.ndarray]:
    """Load RGB PNG backgrounds in sorted order."""
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise ValueError(f"{directory}: no background PNGs found")
    backgrounds = []
    for path in paths:
        with Image.open(path) as im:
            backgrounds.append(np.asarray(im.convert("RGB")))
    return backgrounds


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def transform_foreground(rgba: np.ndarray, scale: float, rotation_deg: float,
                         lightness: float) -> np.ndarray:
    """Scale, rotate (bilinear, expanding) and brighten a cut-out.

    The mask consumer binarizes alpha at 128, matching the alpha >= 0.5
    convention for resampled masks.
    """
    out = rgba
    if scale != 1.0:
        h, w = out.shape[:2]
        size = (max(1, round(w * scale)), max(1, round(h * scale)))
        out = np.asarray(Image.fromarray(out).resize(size, Image.Resampling.BILINEAR))
    if rotation_deg % 360 != 0.0:
        im = Image.fromarray(out).rotate(rotation_deg, resample=Image.Resampling.BILINEAR,
                                         expand=True)
        out = np.asarray(im)
    if lightness != 1.0:
        rgb = np.clip(np.rint(out[:, :, :3].astype(np.float64) * lightness), 0, 255)
        out = np.dstack([rgb.astype(np.uint8), out[:, :, 3]])
    return out


def compose(
    recipe: SceneRecipe,
    fg_library: ForegroundLibrary,
    bg_library: Sequence[np.ndarray],
) -> tuple[np.ndarray, list[InstanceMask], list[CocoAnnotation]]:
    """Render a recipe: returns (image, visible masks, annotations).

    One annotation per surviving instance (at least one visible opaque
    pixel); bbox and area are derived exactly from the visible mask.
    Annotation ids run 1..k in placement order; image_id is 0 until the
    dataset assembler assigns the real one.
    """
    if not 0 <= recipe.background_id < len(bg_library):
        raise ValueError(f"background id {recipe.background_id} not in library")
    canvas = bg_library[recipe.background_id].copy()
    if canvas.ndim != 3 or canvas.shape[2] != 3 or canvas.dtype != np.uint8:
        raise ValueError("backgrounds must be uint8 RGB")
    bg_h, bg_w = canvas.shape[:2]
    owner = np.full((bg_h, bg_w), -1, dtype=np.int32)

    for k, pl in enumerate(recipe.placements):
        if not 0 <= pl.foreground_id < len(fg_library.instances):
            raise ValueError(f"placement {k}: foreground id {pl.foreground_id} not in library")
        fg = fg_library.instances[pl.foreground_id]
        rgba = transform_foreground(fg.image, pl.scale, pl.rotation_deg, pl.lightness)
        fh, fw = rgba.shape[:2]
        if pl.x >= bg_w or pl.y >= bg_h or pl.x + fw <= 0 or pl.y + fh <= 0:
            raise ValueError(f"placement {k} lies fully outside the {bg_w}x{bg_h} background")
        sx, sy = max(0, -pl.x), max(0, -pl.y)
        dx, dy = max(0, pl.x), max(0, pl.y)
        w = min(fw - sx, bg_w - dx)
        h = min(fh - sy, bg_h - dy)
        sub = rgba[sy:sy + h, sx:sx + w]
        opaque = sub[:, :, 3] >= 128
        canvas[dy:dy + h, dx:dx + w][opaque] = sub[:, :, :3][opaque]
        owner[dy:dy + h, dx:dx + w][opaque] = k

    masks: list[InstanceMask] = []
    annotations: list[CocoAnnotation] = []
    for k, pl in enumerate(recipe.placements):
        visible = owner == k
        if not visible.any():
            continue  # fully occluded by later placements
        mask = InstanceMask(visible)
        category = fg_library.instances[pl.foreground_id].category_id
        annotations.append(annotation_from_mask(len(annotations) + 1, 0, category, mask))
        masks.append(mask)
    return canvas, masks, annotations


def connected_components(mask: InstanceMask) -> list[InstanceMask]:
    """8-connected components of a mask, in label order."""
    labeled, count = ndimage.label(mask.data, structure=_EIGHT_CONNECTED)
    return [InstanceMask(labeled == i) for i in range(1, count + 1)]


def apply_occlusion_policy(
    masks: Sequence[InstanceMask],
    annotations: Sequence[CocoAnnotation],
    policy: str,
    min_area: int = 1,
) -> tuple[list[InstanceMask], list[CocoAnnotation]]:
    """Filter composed instances whose visible masks were cut into pieces.

    keep: annotate the visible region as-is, fragmented or not.
    drop_fragmented: discard any instance with 2+ connected components.
    split_components: one annotation per component of at least
    ``min_area`` pixels.

    Output annotation ids are renumbered 1..k.
    """
    if policy not in OCCLUSION_POLICIES:
        raise ValueError(f"policy must be one of {OCCLUSION_POLICIES}, got {policy!r}")
    out_masks: list[InstanceMask] = []
    out_anns: list[CocoAnnotation] = []
    for mask, ann in zip(masks, annotations):
        if policy == "keep":
            pieces = [mask]
        else:
            components = connected_components(mask)
            if policy == "drop_fragmented":
                if len(components) >= 2:
                    continue
                pieces = [mask]
            else:
                pieces = [c for c in components if c.area >= min_area]
        for piece in pieces:
            out_masks.append(piece)
            out_anns.append(annotation_from_mask(
                len(out_anns) + 1, ann.image_id, ann.category_id, piece, ann.iscrowd))
    return out_masks, out_anns


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _photometric(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    if brightness == 1.0 and contrast == 1.0:
        return image
    values = image.astype(np.float64) * brightness
    if contrast != 1.0:
        mean = values.mean()
        values = (values - mean) * contrast + mean
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def augment(
    image: np.ndarray,
    annotations: Sequence[CocoAnnotation],
    cfg: AugmentConfig,
    seed: int,
) -> tuple[np.ndarray, list[CocoAnnotation]]:
    """Apply one random draw of the augmentation recipe.

    Rotation (90-degree multiples) and horizontal flip are exact;
    corner clipping crops the image and re-tightens annotations,
    dropping instances below ``cfg.min_area``. Brightness and contrast
    perturb pixels only. Deterministic per (cfg, seed). Annotations
    keep their ids except those dropped by clipping.
    """
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]
    masks = [segmentation_to_mask(a.segmentation, w, h).data for a in annotations]

    rotation = int(rng.choice(np.asarray(cfg.rotations)))
    quarter_turns = (rotation // 90) % 4
    if quarter_turns:
        image = np.rot90(image, k=quarter_turns)
        masks = [np.rot90(m, k=quarter_turns) for m in masks]

    if cfg.hflip_prob > 0 and rng.random() < cfg.hflip_prob:
        image = image[:, ::-1]
        masks = [m[:, ::-1] for m in masks]

    clipped = False
    if cfg.corner_clip_prob > 0 and rng.random() < cfg.corner_clip_prob:
        clipped = True
        hh, ww = image.shape[:2]
        clip_w = int(rng.integers(1, max(2, int(ww * cfg.corner_clip_max_frac)) + 1))
        clip_h = int(rng.integers(1, max(2, int(hh * cfg.corner_clip_max_frac)) + 1))
        corner = int(rng.integers(4))  # 0=TL 1=TR 2=BL 3=BR
        xs = slice(clip_w, ww) if corner in (0, 2) else slice(0, ww - clip_w)
        ys = slice(clip_h, hh) if corner in (0, 1) else slice(0, hh - clip_h)
        image = image[ys, xs]
        masks = [m[ys, xs] for m in masks]

    brightness = rng.uniform(*cfg.brightness)
    contrast = rng.uniform(*cfg.contrast)
    image = _photometric(np.ascontiguousarray(image), brightness, contrast)

    min_area = max(1, cfg.min_area) if clipped else 1
    out = []
    for ann, mask_data in zip(annotations, masks):
        mask = InstanceMask(np.ascontiguousarray(mask_data))
        if mask.area < min_area:
            continue
        out.append(annotation_from_mask(ann.id, ann.image_id, ann.category_id, mask, ann.iscrowd))
    return image, out


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def random_recipe(
    rng: np.random.Generator,
    fg_library: ForegroundLibrary,
    bg_shape: tuple[int, int],
    cfg: SynthConfig,
    background_id: int,
    seed: int = 0,
) -> SceneRecipe:
    """Draw placements whose transformed cut-outs overlap the background."""
    bg_h, bg_w = bg_shape
    lo, hi = cfg.placements_per_scene
    count = int(rng.integers(lo, hi + 1))
    placements = []
    for _ in range(count):
        fg_id = int(rng.integers(len(fg_library.instances)))
        scale = float(rng.uniform(*cfg.scale_range))
        rotation = float(rng.uniform(*cfg.rotation_range))
        lightness = float(rng.uniform(*cfg.lightness_range))
        transformed = transform_foreground(
            fg_library.instances[fg_id].image, scale, rotation, lightness)
        fh, fw = transformed.shape[:2]
        # Top-left chosen so the cut-out's centre stays on the canvas.
        x = int(rng.integers(0, bg_w)) - fw // 2
        y = int(rng.integers(0, bg_h)) - fh // 2
        placements.append(Placement(fg_id, scale, rotation, lightness, x, y))
    return SceneRecipe(background_id=background_id, placements=tuple(placements), seed=seed)


def _scene_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Per-image seed split: SeedSequence([master, index])."""
    return np.random.SeedSequence([master_seed, index])


def _render_scene(
    index: int,
    master_seed: int,
    fg_library: ForegroundLibrary,
    bg_library: Sequence[np.ndarray],
    cfg: SynthConfig,
    out_dir: Path,
) -> tuple[int, str, int, int, list[CocoAnnotation]]:
    rng = np.random.default_rng(_scene_seed(master_seed, index))
    background_id = int(rng.integers(len(bg_library)))
    recipe = random_recipe(rng, fg_library, bg_library[background_id].shape[:2],
                           cfg, background_id, seed=master_seed)
    image, masks, anns = compose(recipe, fg_library, bg_library)
    masks, anns = apply_occlusion_policy(masks, anns, cfg.occlusion, cfg.min_area)
    if cfg.augment is not None:
        aug_seed = int(rng.integers(np.iinfo(np.int64).max))
        image, anns = augment(image, anns, cfg.augment, aug_seed)
    file_name = f"{cfg.file_prefix}_{index:05d}.png"
    Image.fromarray(np.ascontiguousarray(image)).save(out_dir / file_name, format="PNG")
    return index, file_name, image.shape[1], image.shape[0], anns


_WORKER_STATE: dict = {}


def _init_worker(fg_library, bg_library, cfg, out_dir) -> None:
    _WORKER_STATE.update(fg=fg_library, bg=bg_library, cfg=cfg, out=out_dir)


def _worker_render(args: tuple[int, int]) -> tuple[int, str, int, int, list[CocoAnnotation]]:
    index, master_seed = args
    return _render_scene(index, master_seed, _WORKER_STATE["fg"], _WORKER_STATE["bg"],
                         _WORKER_STATE["cfg"], _WORKER_STATE["out"])


def generate_dataset(
    n_images: int,
    fg_library: ForegroundLibrary,
    bg_library: Sequence[np.ndarray],
    cfg: SynthConfig,
    seed: int,
    out_dir: Union[str, Path],
    threads: int = 1,
    annotations_name: str = "annotations.json",
) -> CocoDataset:
    """Write ``n_images`` composed scenes plus one COCO file.

    Fully reproducible: scene i draws from SeedSequence([seed, i]), so
    the output is independent of thread schedule and identical across
    re-runs.
    """
    if not fg_library.instances:
        raise ValueError("foreground library is empty")
    if not len(bg_library):
        raise ValueError("background library is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(fg_library, bg_library, cfg, out)) as pool:
            results = list(pool.map(_worker_render, [(i, seed) for i in range(n_images)],
                                    chunksize=8))
    else:
        results = [_render_scene(i, seed, fg_library, bg_library, cfg, out)
                   for i in range(n_images)]
    results.sort(key=lambda r: r[0])

    images = []
    annotations = []
    next_ann_id = 1
    for index, file_name, width, height, anns in results:
        image_id = index + 1
        images.append(CocoImage(id=image_id, file_name=file_name, width=width, height=height))
        for ann in anns:
            ann.id = next_ann_id
            ann.image_id = image_id
            annotations.append(ann)
            next_ann_id += 1

    ds = CocoDataset(images=images, annotations=annotations, categories=list(fg_library.categories))
    write_coco(ds, out / annotations_name)
    return ds
