"""Synthetic annulus images standing in for short-axis myocardium slices."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import ConfigError, DatasetConfig
from .topology import betti_numbers

SPLITS = ("train", "val", "test")


@dataclass
class SynthSample:
    image: np.ndarray  # (1, h, w) in [0, 1]
    label: np.ndarray  # (h, w) bool
    meta: dict = field(default_factory=dict)


def annulus(h: int, w: int, center, radius: float, thickness: float, aspect: float = 1.0, angle: float = 0.0) -> np.ndarray:
    """Mask of an (optionally elliptical) ring of mean radius ``radius``."""
    r, c = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dr, dc = r - center[0], c - center[1]
    if aspect != 1.0 or angle:
        ca, sa = np.cos(angle), np.sin(angle)
        u = ca * dr + sa * dc
        v = -sa * dr + ca * dc
        dist = np.hypot(u / aspect, v * aspect)
    else:
        dist = np.hypot(dr, dc)
    return (dist >= radius - thickness / 2) & (dist <= radius + thickness / 2)


def make_prior(h: int, w: int, radius: float, thickness: float) -> np.ndarray:
    """Centred annulus prior; rejects rings that are filled or leave the frame."""
    if thickness >= 2 * radius:
        raise ConfigError(f"thickness {thickness} >= 2*radius {2 * radius}: the ring would be a filled disk")
    if radius + thickness / 2 > min(h, w) / 2 - 1:
        raise ConfigError(f"annulus of radius {radius} + {thickness}/2 does not fit a {h}x{w} frame")
    m = annulus(h, w, ((h - 1) / 2, (w - 1) / 2), radius, thickness)
    if betti_numbers(m) != (1, 1):
        raise ConfigError(f"prior with radius {radius}, thickness {thickness} is not a ring at this resolution")
    return m


def _render(rng, label: np.ndarray, pool: np.ndarray, cfg: DatasetConfig) -> np.ndarray:
    h, w = label.shape
    r, c = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    # slowly varying background (bias field)
    gr, gc = rng.uniform(-0.08, 0.08, 2)
    img = rng.uniform(0.12, 0.25) + gr * r + gc * c
    for _ in range(int(rng.integers(0, cfg.max_distractors + 1))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(2.0, 5.0)
        blob = np.exp(-((np.arange(h)[:, None] - cy) ** 2 + (np.arange(w)[None, :] - cx) ** 2) / (2 * s * s))
        img = img + rng.uniform(0.2, 0.45) * blob * ~(label | pool)
    img = np.where(pool, rng.uniform(0.40, 0.50), img)
    img = np.where(label, rng.uniform(0.70, 0.85), img)
    img = ndimage.gaussian_filter(img, 0.7, mode="nearest")
    img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_rng(cfg: DatasetConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.data_seed, index]))


def generate_sample(rng: np.random.Generator, cfg: DatasetConfig) -> SynthSample:
    """Random off-centre ring with background, blood pool, distractors and noise."""
    h, w = cfg.h, cfg.w
    for _ in range(100):
        radius = rng.uniform(cfg.radius_min, cfg.radius_max)
        thick = rng.uniform(cfg.thickness_min, cfg.thickness_max)
        aspect = rng.uniform(0.9, 1.1)
        angle = rng.uniform(0.0, np.pi)
        reach = (radius + thick / 2) * max(aspect, 1 / aspect) + 2
        if 2 * reach > min(h, w):
            continue
        cy = rng.uniform(reach, h - 1 - reach)
        cx = rng.uniform(reach, w - 1 - reach)
        label = annulus(h, w, (cy, cx), radius, thick, aspect, angle)
        if betti_numbers(label) != (1, 1):
            continue
        filled = ndimage.binary_fill_holes(label)
        pool = filled & ~label
        img = _render(rng, label, pool, cfg)
        meta = dict(cy=cy, cx=cx, radius=radius, thickness=thick, aspect=aspect, angle=angle)
        return SynthSample(img[None], label, meta)
    raise RuntimeError("could not place an annulus in the frame; check the dataset config")


def _affine(sample: SynthSample, angle_deg: float, shift, zoom: float) -> SynthSample:
    img = sample.image[0]
    h, w = img.shape
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    t = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    # output -> input coordinates
    M = rot.T / zoom
    offset = center - M @ (center + np.asarray(shift, dtype=np.float64))
    out_img = ndimage.affine_transform(img, M, offset, order=1, mode="nearest")
    out_lab = ndimage.affine_transform(sample.label.astype(np.uint8), M, offset, order=0, mode="constant", cval=0)
    meta = dict(sample.meta, aug_angle=angle_deg, aug_shift=tuple(shift), aug_zoom=zoom)
    return SynthSample(out_img[None], out_lab.astype(bool), meta)


def augment_with(sample: SynthSample, angle_deg: float = 0.0, shift=(0.0, 0.0), zoom: float = 1.0) -> SynthSample:
    """Deterministic rotation (about the frame centre), shift and zoom."""
    if angle_deg == 0.0 and zoom == 1.0 and tuple(shift) == (0.0, 0.0):
        return SynthSample(sample.image.copy(), sample.label.copy(), dict(sample.meta))
    return _affine(sample, angle_deg, shift, zoom)


def _fits(label: np.ndarray) -> bool:
    if label[[0, -1], :].any() or label[:, [0, -1]].any():
        return False
    return betti_numbers(label) == (1, 1)


def augment(sample: SynthSample, rng: np.random.Generator, max_tries: int = 20) -> SynthSample:
    """Random rotation, shift, zoom, or all three; the label stays a single ring."""
    h, w = sample.label.shape
    for _ in range(max_tries):
        kind = int(rng.integers(0, 4))
        angle = rng.uniform(-30, 30) if kind in (0, 3) else 0.0
        shift = (rng.uniform(-0.1, 0.1) * h, rng.uniform(-0.1, 0.1) * w) if kind in (1, 3) else (0.0, 0.0)
        zoom = rng.uniform(0.8, 1.2) if kind in (2, 3) else 1.0
        out = augment_with(sample, angle, shift, zoom)
        if _fits(out.label):
            return out
    return SynthSample(sample.image.copy(), sample.label.copy(), dict(sample.meta))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    cfg: DatasetConfig
    train: list[SynthSample]
    val: list[SynthSample]
    test: list[SynthSample]

    def split(self, name: str) -> list[SynthSample]:
        return getattr(self, name)


def split_ranges(cfg: DatasetConfig) -> dict[str, range]:
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    return {"train": range(0, a), "val": range(a, b), "test": range(b, b + cfg.n_test)}


def make_sample(cfg: DatasetConfig, index: int, split: str) -> SynthSample:
    rng = sample_rng(cfg, index)
    s = generate_sample(rng, cfg)
    if split == "train":
        s = augment(s, rng)
    s.meta.update(index=index, split=split, seed=f"{cfg.data_seed}:{index}")
    return s


def generate_dataset(cfg: DatasetConfig) -> Dataset:
    parts = {name: [make_sample(cfg, i, name) for i in idx] for name, idx in split_ranges(cfg).items()}
    return Dataset(cfg, **parts)


def quantize(sample: SynthSample) -> SynthSample:
    """Round-trip the image through 8 bits, exactly as it is stored on disk."""
    img = np.round(np.clip(sample.image, 0, 1) * 255.0) / 255.0
    return dataclasses.replace(sample, image=img)


# ---------------------------------------------------------------------------
# PGM + manifest IO
# ---------------------------------------------------------------------------


def write_pgm(path, arr: np.ndarray) -> None:
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise TypeError("write_pgm expects uint8 data")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(a).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PGM")
    return data.reshape(h, w).copy()


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def heatmap_u8(arr: np.ndarray) -> np.ndarray:
    """Linear min-max normalisation to 0..255; constant input maps to mid-grey."""
    a = np.asarray(arr, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


MANIFEST_FIELDS = ["index", "split", "seed", "image", "label", "cy", "cx", "radius", "thickness"]


def save_dataset(ds: Dataset, out: Path) -> Path:
    out = Path(out)
    for name in SPLITS:
        (out / name).mkdir(parents=True, exist_ok=True)
    rows = []
    for name in SPLITS:
        for s in ds.split(name):
            i = s.meta["index"]
            img_rel = f"{name}/img_{i:04d}.pgm"
            lab_rel = f"{name}/lab_{i:04d}.pgm"
            write_pgm(out / img_rel, to_u8(s.image[0]))
            write_pgm(out / lab_rel, (s.label.astype(np.uint8) * 255))
            rows.append(
                dict(
                    index=i,
                    split=name,
                    seed=s.meta["seed"],
                    image=img_rel,
                    label=lab_rel,
                    cy=f"{s.meta['cy']:.6f}",
                    cx=f"{s.meta['cx']:.6f}",
                    radius=f"{s.meta['radius']:.6f}",
                    thickness=f"{s.meta['thickness']:.6f}",
                )
            )
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def load_dataset(root: Path, cfg: DatasetConfig | None = None) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest}: dataset manifest not found")
    parts: dict[str, list[SynthSample]] = {name: [] for name in SPLITS}
    with open(manifest, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            img = read_pgm(root / row["image"]).astype(np.float64) / 255.0
            lab = read_pgm(root / row["label"]) > 127
            meta = dict(
                index=int(row["index"]),
                split=row["split"],
                seed=row["seed"],
                cy=float(row["cy"]),
                cx=float(row["cx"]),
                radius=float(row["radius"]),
                thickness=float(row["thickness"]),
                path=row["image"],
            )
            parts[row["split"]].append(SynthSample(img[None], lab, meta))
    if cfg is None:
        everything = [s for name in SPLITS for s in parts[name]]
        if not everything:
            raise ValueError(f"{manifest}: manifest lists no samples")
        h, w = everything[0].label.shape
        radii = [s.meta["radius"] for s in everything]
        thick = [s.meta["thickness"] for s in everything]
        cfg = DatasetConfig(
            h=h,
            w=w,
            n_train=len(parts["train"]),
            n_val=len(parts["val"]),
            n_test=len(parts["test"]),
            radius_min=min(radii),
            radius_max=max(radii),
            thickness_min=min(thick),
            thickness_max=max(thick),
        )
    return Dataset(cfg, **parts)
