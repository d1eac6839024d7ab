"""Dataset ingestion, stratified splitting, augmentation, and a synthetic
generator for desk-scale verification.

Directory layout: either ``<root>/yes/...`` and ``<root>/no/...`` folders,
or flat files whose names start with ``y`` (positive) or ``no`` (negative).
Files that cannot be labeled or decoded land in a skip report instead of
being silently dropped.

The training transform is resize -> flips -> rotation -> color jitter ->
per-channel normalization; validation and test data are only resized and
normalized. All resampling is bilinear with zero fill outside the source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image, UnidentifiedImageError

from .seeding import rng_for

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


class DataError(RuntimeError):
    """Dataset could not be loaded or partitioned as requested."""


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # [3,H,W] float32 in [0,1]
    label: int  # 1 = tumor, 0 = no tumor
    source: str = ""


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int
    ratios: tuple[float, float, float]
    per_source_counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def all_ids(self) -> list[str]:
        return self.train + self.val + self.test


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    max_rotation_deg: float = 20.0
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    target_size: int = 128


# ---- loading ------------------------------------------------------------------


def default_naming_rule(stem: str) -> int | None:
    """Label from the filename prefix: no* -> 0, y* -> 1, otherwise None."""
    s = stem.lower()
    if s.startswith("no"):
        return 0
    if s.startswith("y"):
        return 1
    return None


def _decode(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = im.convert("RGB")  # grayscale sources are replicated to 3 channels
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_directory(root: str | Path, *, source: str = "",
                   naming_rule: Callable[[str], int | None] = default_naming_rule,
                   ) -> tuple[list[ImageRecord], list[tuple[str, str]]]:
    """Load every labeled image under ``root`` in lexicographic id order.

    Returns (records, skipped) where skipped holds (relative path, reason)
    for every file that produced no record.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root '{root}' is not a directory")

    candidates: list[tuple[Path, int | None]] = []
    for sub, label in (("yes", 1), ("no", 0)):
        folder = root / sub
        if folder.is_dir():
            for p in folder.rglob("*"):
                if p.is_file():
                    candidates.append((p, label))
    for p in root.iterdir():
        if p.is_file():
            candidates.append((p, None))

    candidates.sort(key=lambda c: c[0].relative_to(root).as_posix())
    records: list[ImageRecord] = []
    skipped: list[tuple[str, str]] = []
    for path, folder_label in candidates:
        rel = path.relative_to(root).as_posix()
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            skipped.append((rel, "unsupported extension"))
            continue
        label = folder_label if folder_label is not None else naming_rule(path.stem)
        if label is None:
            skipped.append((rel, "unlabeled"))
            continue
        try:
            pixels = _decode(path)
        except (OSError, UnidentifiedImageError) as e:
            skipped.append((rel, f"undecodable: {e}"))
            continue
        records.append(ImageRecord(id=rel, pixels=pixels, label=label, source=source))
    return records, skipped


# ---- splitting ----------------------------------------------------------------


def stratified_split(records: list[ImageRecord], ratios: tuple[float, float, float],
                     seed: int) -> SplitManifest:
    """Seeded per-(source, class) shuffling followed by proportional assignment."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    labels = {r.label for r in records}
    if labels != {0, 1}:
        raise DataError(f"need both classes to split, found labels {sorted(labels)}")

    groups: dict[tuple[str, int], list[str]] = {}
    for r in records:
        groups.setdefault((r.source, r.label), []).append(r.id)

    train: list[str] = []
    val: list[str] = []
    test: list[str] = []
    counts: dict[str, dict[str, int]] = {}
    for key in sorted(groups):
        ids = sorted(groups[key])
        rng = rng_for(seed, "split", key[0], key[1])
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n = len(ids)
        c1 = int(round(n * ratios[0]))
        c2 = int(round(n * (ratios[0] + ratios[1])))
        train += ids[:c1]
        val += ids[c1:c2]
        test += ids[c2:]
        per = counts.setdefault(key[0], {"train": 0, "val": 0, "test": 0})
        per["train"] += c1
        per["val"] += c2 - c1
        per["test"] += n - c2
    return SplitManifest(train=train, val=val, test=test, seed=seed,
                         ratios=tuple(ratios), per_source_counts=counts)


def save_manifest(manifest: SplitManifest, path: str | Path) -> None:
    lines = ["# fscnet split manifest v1",
             f"# seed={manifest.seed}",
             f"# ratios={manifest.ratios[0]!r},{manifest.ratios[1]!r},{manifest.ratios[2]!r}"]
    for source in sorted(manifest.per_source_counts):
        c = manifest.per_source_counts[source]
        lines.append(f"# counts\t{source}\ttrain={c['train']}\tval={c['val']}\ttest={c['test']}")
    for split in ("train", "val", "test"):
        for rid in getattr(manifest, split):
            lines.append(f"{split}\t{rid}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> SplitManifest:
    seed = None
    ratios = None
    counts: dict[str, dict[str, int]] = {}
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("seed="):
                seed = int(body[len("seed="):])
            elif body.startswith("ratios="):
                ratios = tuple(float(v) for v in body[len("ratios="):].split(","))
            elif body.startswith("counts"):
                _, source, *pairs = body.split("\t")
                counts[source] = {k: int(v) for k, v in (p.split("=") for p in pairs)}
            continue
        split, rid = line.split("\t", 1)
        if split not in splits:
            raise DataError(f"manifest row with unknown split '{split}'")
        splits[split].append(rid)
    if seed is None or ratios is None or len(ratios) != 3:
        raise DataError(f"manifest '{path}' is missing its seed/ratios header")
    return SplitManifest(train=splits["train"], val=splits["val"], test=splits["test"],
                         seed=seed, ratios=ratios, per_source_counts=counts)


# ---- resampling ----------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of a [C,H,W] image."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    wy = (ys - y0).astype(img.dtype)
    wx = (xs - x0).astype(img.dtype)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = img[:, y0c][:, :, x0c] * (1 - wx) + img[:, y0c][:, :, x1c] * wx
    bot = img[:, y1c][:, :, x0c] * (1 - wx) + img[:, y1c][:, :, x1c] * wx
    return (top * (1 - wy)[None, :, None] + bot * wy[None, :, None]).astype(img.dtype)


def rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a [C,H,W] image about its center; zero fill outside the source."""
    if degrees == 0.0:
        return img.copy()
    c, h, w = img.shape
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = np.arange(h, dtype=np.float64)[:, None] - cy
    dx = np.arange(w, dtype=np.float64)[None, :] - cx
    sy = cy + cos_t * dy - sin_t * dx
    sx = cx + sin_t * dy + cos_t * dx
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    wy = (sy - y0).astype(img.dtype)
    wx = (sx - x0).astype(img.dtype)
    out = np.zeros_like(img)
    for oy, ox, weight in (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x0 + 1, (1 - wy) * wx),
        (y0 + 1, x0, wy * (1 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ):
        valid = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
        vals = img[:, np.clip(oy, 0, h - 1), np.clip(ox, 0, w - 1)]
        out += vals * (weight * valid).astype(img.dtype)
    return out


# ---- color jitter ----------------------------------------------------------------


def _luma(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    hue = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(delta > 0, (hue / 6.0) % 1.0, 0.0)
    return np.stack([hue, s, v]).astype(img.dtype)


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[0], img[1], img[2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b]).astype(img.dtype)


def _color_jitter(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    # Factors are always drawn so the random stream does not depend on strengths.
    b = rng.uniform(max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness)
    c = rng.uniform(max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast)
    s = rng.uniform(max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation)
    h = rng.uniform(-cfg.hue, cfg.hue)
    if b != 1.0:
        img = np.clip(img * b, 0.0, 1.0)
    if c != 1.0:
        gray = _luma(img).mean()
        img = np.clip((img - gray) * c + gray, 0.0, 1.0)
    if s != 1.0:
        luma = _luma(img)[None]
        img = np.clip((img - luma) * s + luma, 0.0, 1.0)
    if h != 0.0:
        hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[0] = (hsv[0] + h) % 1.0
        img = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return img


# ---- transforms --------------------------------------------------------------------


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=img.dtype).reshape(3, 1, 1)
    std = np.asarray(std, dtype=img.dtype).reshape(3, 1, 1)
    return (img - mean) / std


def augment_pixels(record: ImageRecord, cfg: AugmentConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """Stochastic training transform, still in [0, 1] (no normalization)."""
    img = resize_bilinear(record.pixels, cfg.target_size, cfg.target_size)
    if rng.random() < cfg.hflip_prob:
        img = img[:, :, ::-1].copy()
    if rng.random() < cfg.vflip_prob:
        img = img[:, ::-1, :].copy()
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    img = rotate_bilinear(img, angle)
    img = _color_jitter(img, cfg, rng)
    return np.clip(img, 0.0, 1.0)


def augment(record: ImageRecord, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return normalize(augment_pixels(record, cfg, rng), cfg.mean, cfg.std)


def eval_pixels(record: ImageRecord, cfg: AugmentConfig) -> np.ndarray:
    """Deterministic evaluation transform before normalization: resize only."""
    return resize_bilinear(record.pixels, cfg.target_size, cfg.target_size)


def eval_transform(record: ImageRecord, cfg: AugmentConfig) -> np.ndarray:
    return normalize(eval_pixels(record, cfg), cfg.mean, cfg.std)


# ---- synthetic data -----------------------------------------------------------------


def _synth_image(rng: np.random.Generator, size: int, label: int) -> np.ndarray:
    base = rng.uniform(0.10, 0.35)
    yy = np.arange(size, dtype=np.float64)[:, None]
    xx = np.arange(size, dtype=np.float64)[None, :]
    img = np.full((size, size), base)
    for _ in range(3):
        amp = rng.uniform(0.01, 0.04)
        fy = rng.uniform(-2.5, 2.5)
        fx = rng.uniform(-2.5, 2.5)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        img += amp * np.cos(2.0 * math.pi * (fy * yy + fx * xx) / size + phase)
    img += rng.normal(0.0, 0.01, size=(size, size))
    if label == 1:
        cy = rng.uniform(0.25, 0.75) * size
        cx = rng.uniform(0.25, 0.75) * size
        ra = rng.uniform(0.10, 0.28) * size
        rb = rng.uniform(0.10, 0.28) * size
        theta = rng.uniform(0.0, math.pi)
        inten = rng.uniform(0.35, 0.70)
        dy, dx = yy - cy, xx - cx
        u = (dy * math.cos(theta) + dx * math.sin(theta)) / ra
        v = (-dy * math.sin(theta) + dx * math.cos(theta)) / rb
        r = np.sqrt(u * u + v * v)
        img += inten * np.clip(2.0 * (1.0 - r), 0.0, 1.0)  # bright soft-edged ellipse
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return np.repeat(img[None], 3, axis=0)


def synth_generate(n_per_class: int, image_size: int, seed: int) -> list[ImageRecord]:
    """Deterministic synthetic stand-in: dark textured backgrounds, and for the
    positive class one bright ellipse of random position, size, and intensity."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    records = []
    for label, prefix in ((0, "no"), (1, "y")):
        for i in range(n_per_class):
            rng = rng_for(seed, "synth", label, i)
            records.append(ImageRecord(
                id=f"{prefix}{i:05d}.png",
                pixels=_synth_image(rng, image_size, label),
                label=label,
                source="synthetic",
            ))
    return records


def save_records_as_pngs(records: list[ImageRecord], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in records:
        arr = np.clip(np.round(r.pixels * 255.0), 0, 255).astype(np.uint8)
        im = Image.fromarray(arr.transpose(1, 2, 0))
        path = out_dir / r.id
        im.save(path)
        paths.append(path)
    return paths
