"""Synthetic shape-lesion dataset: generation, photometric perturbation, disk IO.

Images are H x W x 3 float32 in [0,1] (quantized to the 8-bit grid so PNG
round-trips are lossless), masks are H x W uint8 in {0,1}. Every sample
carries a record of its lesion descriptors; re-rasterizing the descriptors
reproduces the stored mask pixel-for-pixel.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter


class ConfigError(ValueError):
    """Invalid generation or perturbation configuration."""


class DatasetError(RuntimeError):
    """Dataset directory is missing files or disagrees with its manifest."""


SIZE_CLASSES = ("small", "medium", "large")

COUNT_WORDS = {
    0: "no", 1: "one", 2: "two", 3: "three", 4: "four",
    5: "five", 6: "six", 7: "seven", 8: "eight", 9: "nine",
}


@dataclass(frozen=True)
class SynthConfig:
    """Controls the synthetic image/mask/prompt generator."""

    height: int = 64
    width: int = 64
    lesion_count_range: tuple[int, int] = (1, 3)
    # radius bands as fractions of min(H, W); must be disjoint and increasing
    size_bands: dict[str, tuple[float, float]] = field(default_factory=lambda: {
        "small": (0.05, 0.09),
        "medium": (0.11, 0.17),
        "large": (0.19, 0.27),
    })
    texture_amplitude: float = 0.06
    texture_smoothing: float = 2.5
    illumination_amplitude: float = 0.12
    base_level: float = 0.45
    lesion_contrast: float = 0.16
    boundary_softness_px: float = 1.5
    channel_tint: float = 0.06

    def validate(self) -> None:
        if self.height % 32 != 0 or self.width % 32 != 0:
            raise ConfigError(
                f"height and width must be divisible by 32, got {self.height}x{self.width}")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo or hi > 9:
            raise ConfigError(f"bad lesion_count_range {self.lesion_count_range}")
        if set(self.size_bands) != set(SIZE_CLASSES):
            raise ConfigError(f"size_bands must have keys {SIZE_CLASSES}")
        prev_hi = 0.0
        for name in SIZE_CLASSES:
            blo, bhi = self.size_bands[name]
            if not (0.0 < blo < bhi):
                raise ConfigError(f"empty or invalid radius band for {name!r}: ({blo}, {bhi})")
            if blo < prev_hi:
                raise ConfigError(f"size band {name!r} overlaps the previous band")
            prev_hi = bhi
        max_r = self.size_bands["large"][1] * min(self.height, self.width)
        if 2 * (max_r * (1.0 + _MAX_BOUNDARY_WOBBLE) + 2.0) >= min(self.height, self.width):
            raise ConfigError("largest radius band does not fit inside the image")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lesion_count_range"] = list(self.lesion_count_range)
        d["size_bands"] = {k: list(v) for k, v in self.size_bands.items()}
        return d


@dataclass(frozen=True)
class PerturbConfig:
    """Photometric perturbation ranges. Masks are never touched."""

    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def validate(self) -> None:
        for name in ("brightness", "contrast", "saturation"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} jitter must be in [0,1), got {v}")
        if not 0.0 <= self.hue <= 0.5:
            raise ConfigError(f"hue shift must be in [0,0.5], got {self.hue}")
        if not 0.0 <= self.grayscale_prob <= 1.0:
            raise ConfigError(f"grayscale_prob must be in [0,1], got {self.grayscale_prob}")
        lo, hi = self.blur_sigma
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad blur_sigma range {self.blur_sigma}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["blur_sigma"] = list(self.blur_sigma)
        return d


# radial boundary wobble: sum of per-harmonic amplitudes stays below this
_MAX_BOUNDARY_WOBBLE = 0.24
_HARMONICS = (2, 3, 5)


@dataclass(frozen=True)
class LesionSpec:
    """Full descriptor of one blob lesion; rasterization is a pure function of it."""

    size_class: str
    center_y: float
    center_x: float
    radius_y: float
    radius_x: float
    angle: float
    # (harmonic order, amplitude, phase) triples modulating the boundary radius
    harmonics: tuple[tuple[int, float, float], ...]

    def to_dict(self) -> dict:
        return {
            "size_class": self.size_class,
            "center_y": self.center_y,
            "center_x": self.center_x,
            "radius_y": self.radius_y,
            "radius_x": self.radius_x,
            "angle": self.angle,
            "harmonics": [[k, a, p] for k, a, p in self.harmonics],
        }

    @staticmethod
    def from_dict(d: dict) -> "LesionSpec":
        return LesionSpec(
            size_class=d["size_class"],
            center_y=d["center_y"],
            center_x=d["center_x"],
            radius_y=d["radius_y"],
            radius_x=d["radius_x"],
            angle=d["angle"],
            harmonics=tuple((int(k), float(a), float(p)) for k, a, p in d["harmonics"]),
        )


@dataclass(frozen=True)
class SampleRecord:
    """Provenance of one sample: seed, prompt, and exact lesion geometry."""

    sample_id: str
    seed: int
    height: int
    width: int
    prompt: str
    lesions: tuple[LesionSpec, ...]
    image_path: str | None = None
    mask_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "seed": self.seed,
            "height": self.height,
            "width": self.width,
            "prompt": self.prompt,
            "lesions": [l.to_dict() for l in self.lesions],
            "image_path": self.image_path,
            "mask_path": self.mask_path,
        }

    @staticmethod
    def from_dict(d: dict) -> "SampleRecord":
        return SampleRecord(
            sample_id=d["sample_id"],
            seed=int(d["seed"]),
            height=int(d["height"]),
            width=int(d["width"]),
            prompt=d["prompt"],
            lesions=tuple(LesionSpec.from_dict(l) for l in d["lesions"]),
            image_path=d.get("image_path"),
            mask_path=d.get("mask_path"),
        )


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray  # H x W x 3 float32 in [0,1]
    mask: np.ndarray   # H x W uint8 in {0,1}
    prompt: str
    record: SampleRecord | None


def _lesion_fields(lesion: LesionSpec, height: int, width: int):
    """Signed interior field of a lesion: rho (normalized radius) and the
    angle-modulated boundary radius, evaluated on the full pixel grid."""
    yy = np.arange(height, dtype=np.float64)[:, None]
    xx = np.arange(width, dtype=np.float64)[None, :]
    dy = yy - lesion.center_y
    dx = xx - lesion.center_x
    ca, sa = np.cos(lesion.angle), np.sin(lesion.angle)
    u = (dx * ca + dy * sa) / lesion.radius_x
    v = (-dx * sa + dy * ca) / lesion.radius_y
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    boundary = np.ones_like(rho)
    for k, amp, phase in lesion.harmonics:
        boundary += amp * np.cos(k * phi + phase)
    return rho, boundary


def rasterize_lesions(lesions, height: int, width: int) -> np.ndarray:
    """Union of lesion interiors as an H x W uint8 mask in {0,1}."""
    mask = np.zeros((height, width), dtype=bool)
    for lesion in lesions:
        rho, boundary = _lesion_fields(lesion, height, width)
        mask |= rho <= boundary
    return mask.astype(np.uint8)


def _quadrant(cy: float, cx: float, height: int, width: int) -> str:
    vert = "upper" if cy < height / 2 else "lower"
    horiz = "left" if cx < width / 2 else "right"
    return f"{vert} {horiz}"


def make_prompt(lesions, height: int, width: int) -> str:
    """Closed prompt grammar: count word, then one size/quadrant clause per lesion.

    "no lesion" | "<count> lesion(s), one <size> <quadrant>[, ...]"
    """
    if not lesions:
        return "no lesion"
    n = len(lesions)
    noun = "lesion" if n == 1 else "lesions"
    clauses = [
        f"one {l.size_class} {_quadrant(l.center_y, l.center_x, height, width)}"
        for l in lesions
    ]
    return f"{COUNT_WORDS[n]} {noun}, " + ", ".join(clauses)


def _draw_lesions(rng: np.random.Generator, cfg: SynthConfig) -> tuple[LesionSpec, ...]:
    n = int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))
    scale = min(cfg.height, cfg.width)
    lesions = []
    for _ in range(n):
        size_class = SIZE_CLASSES[int(rng.integers(0, len(SIZE_CLASSES)))]
        blo, bhi = cfg.size_bands[size_class]
        ry = float(rng.uniform(blo, bhi)) * scale
        rx = float(rng.uniform(blo, bhi)) * scale
        angle = float(rng.uniform(0.0, np.pi))
        harmonics = []
        # amplitudes shrink with harmonic order; total wobble < _MAX_BOUNDARY_WOBBLE
        for k in _HARMONICS:
            amp = float(rng.uniform(0.01, 0.07 / np.sqrt(k)))
            phase = float(rng.uniform(0.0, 2.0 * np.pi))
            harmonics.append((k, amp, phase))
        margin = max(ry, rx) * (1.0 + _MAX_BOUNDARY_WOBBLE) + 2.0
        cy = float(rng.uniform(margin, cfg.height - margin))
        cx = float(rng.uniform(margin, cfg.width - margin))
        lesions.append(LesionSpec(size_class, cy, cx, ry, rx, angle, tuple(harmonics)))
    return tuple(lesions)


def _compose_image(rng: np.random.Generator, cfg: SynthConfig, lesions) -> np.ndarray:
    h, w = cfg.height, cfg.width
    gray = np.full((h, w), cfg.base_level, dtype=np.float64)

    # gentle illumination ramp in a random direction
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy = (np.arange(h, dtype=np.float64)[:, None] / max(h - 1, 1)) - 0.5
    xx = (np.arange(w, dtype=np.float64)[None, :] / max(w - 1, 1)) - 0.5
    gray += cfg.illumination_amplitude * (np.cos(theta) * yy + np.sin(theta) * xx) * 2.0

    # smoothed background texture
    noise = rng.standard_normal((h, w))
    noise = gaussian_filter(noise, sigma=cfg.texture_smoothing, mode="reflect")
    std = noise.std()
    if std > 0:
        gray += cfg.texture_amplitude * noise / std

    # soft-edged lesion bumps (appearance only; the mask uses the hard predicate)
    for lesion in lesions:
        rho, boundary = _lesion_fields(lesion, h, w)
        signed_px = (boundary - rho) * min(lesion.radius_y, lesion.radius_x)
        soft = np.clip(signed_px / cfg.boundary_softness_px, 0.0, 1.0)
        gray += cfg.lesion_contrast * float(rng.uniform(0.8, 1.2)) * soft

    gains = 1.0 + rng.uniform(-cfg.channel_tint, cfg.channel_tint, size=3)
    img = np.clip(gray[:, :, None] * gains[None, None, :], 0.0, 1.0)
    # quantize to the 8-bit grid so PNG round-trips are exact
    img = np.round(img * 255.0) / 255.0
    return img.astype(np.float32)


def generate_sample(seed: int, cfg: SynthConfig,
                    sample_id: str | None = None) -> tuple[np.ndarray, np.ndarray, str, SampleRecord]:
    """Deterministic (image, mask, prompt, record) for one seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    lesions = _draw_lesions(rng, cfg)
    mask = rasterize_lesions(lesions, cfg.height, cfg.width)
    image = _compose_image(rng, cfg, lesions)
    prompt = make_prompt(lesions, cfg.height, cfg.width)
    record = SampleRecord(
        sample_id=sample_id if sample_id is not None else f"s{seed}",
        seed=seed,
        height=cfg.height,
        width=cfg.width,
        prompt=prompt,
        lesions=lesions,
    )
    return image, mask, prompt, record


def generate_dataset(n: int, base_seed: int, cfg: SynthConfig) -> list[Sample]:
    samples = []
    for i in range(n):
        image, mask, prompt, record = generate_sample(base_seed + i, cfg, sample_id=f"{i:05d}")
        samples.append(Sample(record.sample_id, image, mask, prompt, record))
    return samples


# ---------------------------------------------------------------------------
# photometric perturbation


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices = [
        np.stack([v, t, p], axis=-1),
        np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1),
        np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1),
        np.stack([v, p, q], axis=-1),
    ]
    out = np.zeros(hsv.shape, dtype=hsv.dtype)
    for idx, ch in enumerate(choices):
        out = np.where((i == idx)[..., None], ch, out)
    return out


def _luminance(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def perturb(img: np.ndarray, seed: int, cfg: PerturbConfig) -> np.ndarray:
    """Strong photometric augmentation: brightness/contrast/saturation/hue
    jitter, random grayscale, Gaussian blur. Pure in (img, seed, cfg); never
    geometric, so paired masks stay valid. Output clamped to [0,1]."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    b = 1.0 + float(rng.uniform(-cfg.brightness, cfg.brightness))
    c = 1.0 + float(rng.uniform(-cfg.contrast, cfg.contrast))
    s = 1.0 + float(rng.uniform(-cfg.saturation, cfg.saturation))
    h = float(rng.uniform(-cfg.hue, cfg.hue))
    to_gray = bool(rng.uniform(0.0, 1.0) < cfg.grayscale_prob)
    sigma = float(rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1]))

    out = np.asarray(img, dtype=np.float64).copy()
    if b != 1.0:
        out = np.clip(out * b, 0.0, 1.0)
    if c != 1.0:
        mean = _luminance(out).mean()
        out = np.clip((out - mean) * c + mean, 0.0, 1.0)
    if s != 1.0:
        gray = _luminance(out)[..., None]
        out = np.clip(gray + (out - gray) * s, 0.0, 1.0)
    if h != 0.0:
        hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + h) % 1.0
        out = _hsv_to_rgb(hsv)
    if to_gray:
        out = np.repeat(_luminance(out)[..., None], 3, axis=-1)
    if sigma > 0.0:
        out = gaussian_filter(out, sigma=(sigma, sigma, 0.0), mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


# ---------------------------------------------------------------------------
# disk layout: images/<id>.png, masks/<id>.png, prompts/<id>.txt,
# records/<id>.json, manifest.csv


def write_dataset(samples, out_dir) -> Path:
    """Writes the dataset layout; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("images", "masks", "prompts", "records"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        img8 = np.round(np.asarray(s.image, dtype=np.float64) * 255.0).astype(np.uint8)
        PILImage.fromarray(img8, mode="RGB").save(out / "images" / f"{s.sample_id}.png")
        PILImage.fromarray((s.mask.astype(np.uint8) * 255), mode="L").save(
            out / "masks" / f"{s.sample_id}.png")
        (out / "prompts" / f"{s.sample_id}.txt").write_text(s.prompt + "\n", encoding="utf-8")
        if s.record is not None:
            rec = dataclasses.replace(
                s.record,
                image_path=f"images/{s.sample_id}.png",
                mask_path=f"masks/{s.sample_id}.png",
            )
            (out / "records" / f"{s.sample_id}.json").write_text(
                json.dumps(rec.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "seed", "lesion_count", "size_classes"])
        for s in samples:
            seed = s.record.seed if s.record is not None else ""
            classes = ";".join(l.size_class for l in s.record.lesions) if s.record else ""
            count = len(s.record.lesions) if s.record is not None else ""
            writer.writerow([s.sample_id, seed, count, classes])
    return manifest


def load_dataset(dataset_dir) -> list[Sample]:
    """Loads a dataset directory, verifying every manifest row against disk."""
    root = Path(dataset_dir)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DatasetError(f"missing manifest: {manifest}")
    samples = []
    with manifest.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            sid = row["id"]
            img_path = root / "images" / f"{sid}.png"
            mask_path = root / "masks" / f"{sid}.png"
            prompt_path = root / "prompts" / f"{sid}.txt"
            for p in (img_path, mask_path, prompt_path):
                if not p.exists():
                    raise DatasetError(f"manifest lists {sid!r} but {p} is missing")
            image = np.asarray(PILImage.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
            raw_mask = np.asarray(PILImage.open(mask_path).convert("L"))
            bad = set(np.unique(raw_mask)) - {0, 255}
            if bad:
                raise DatasetError(f"mask {mask_path} has non-binary values {sorted(bad)}")
            mask = (raw_mask == 255).astype(np.uint8)
            if mask.shape != image.shape[:2]:
                raise DatasetError(f"image/mask size mismatch for {sid!r}")
            prompt = prompt_path.read_text(encoding="utf-8").strip()
            rec_path = root / "records" / f"{sid}.json"
            record = None
            if rec_path.exists():
                record = SampleRecord.from_dict(json.loads(rec_path.read_text(encoding="utf-8")))
            samples.append(Sample(sid, image, mask, prompt, record))
    return samples
