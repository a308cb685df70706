"""Dataset manifests, image IO, network-size resampling and synthetic domains."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

LABELS = ("covid", "normal", "pathological")
PROVENANCES = ("source", "general", "portable", "portable-transfer", "portable-heldout")
MANIFEST_MAGIC = "xseg-manifest"
MANIFEST_VERSION = 1


class DataError(Exception):
    pass


class MissingFileError(DataError):
    pass


class MalformedImageError(DataError):
    pass


class UnknownLabelError(DataError):
    pass


class ManifestError(DataError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W in [0, 1], or C x S x S once prepared for the network
    mask: np.ndarray  # H x W in {0, 1}
    label: str
    source_id: str

    def __post_init__(self):
        if self.image.shape[-2:] != self.mask.shape[-2:]:
            raise ValueError(f"{self.source_id}: image {self.image.shape} vs mask {self.mask.shape}")
        if self.label not in LABELS:
            raise UnknownLabelError(f"{self.source_id}: unknown label {self.label!r}")


@dataclass(frozen=True)
class ManifestEntry:
    image: Path
    mask: Path
    label: str

    @property
    def source_id(self) -> str:
        return self.image.stem


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    provenance: str
    version: int = MANIFEST_VERSION
    path: Path | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.entries)

    def ids(self) -> set[str]:
        return {str(e.image.resolve()) for e in self.entries}

    def subset(self, indices, provenance: str | None = None) -> "DatasetManifest":
        return DatasetManifest([self.entries[i] for i in indices], provenance or self.provenance)

    def labels(self) -> list[str]:
        return [e.label for e in self.entries]


def _check_provenance(tag: str) -> str:
    if tag not in PROVENANCES and not tag.startswith("synthetic-"):
        raise ManifestError(f"unknown provenance tag {tag!r}")
    return tag


# --------------------------------------------------------------------------
# manifest text format
#
#   xseg-manifest 1
#   provenance general
#   images/g0000.png<TAB>masks/g0000.png<TAB>covid
#
# Blank lines and lines starting with '#' are ignored. Relative paths are
# resolved against the manifest's directory.


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    lines = [ln.rstrip("\n") for ln in path.read_text().splitlines()]
    lines = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if len(lines) < 2:
        raise ManifestError(f"{path}: missing header lines")
    magic, _, version = lines[0].partition(" ")
    if magic != MANIFEST_MAGIC or not version.strip().isdigit():
        raise ManifestError(f"{path}: bad header {lines[0]!r}")
    if int(version) != MANIFEST_VERSION:
        raise ManifestError(f"{path}: manifest version {version}, expected {MANIFEST_VERSION}")
    key, _, tag = lines[1].partition(" ")
    if key != "provenance":
        raise ManifestError(f"{path}: second line must be 'provenance <tag>'")
    root = path.parent
    entries = []
    seen = set()
    for lineno, ln in enumerate(lines[2:], start=3):
        parts = ln.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected image<TAB>mask<TAB>label")
        img, msk, label = parts
        if label not in LABELS:
            raise UnknownLabelError(f"{path}:{lineno}: unknown label {label!r}")
        img_p = (root / img) if not Path(img).is_absolute() else Path(img)
        if img_p in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image path {img}")
        seen.add(img_p)
        entries.append(ManifestEntry(img_p, (root / msk) if not Path(msk).is_absolute() else Path(msk), label))
    return DatasetManifest(entries, _check_provenance(tag.strip()), int(version), path)


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    root = path.parent.resolve()
    out = [f"{MANIFEST_MAGIC} {MANIFEST_VERSION}", f"provenance {manifest.provenance}"]
    for e in manifest.entries:
        rel = []
        for p in (e.image, e.mask):
            try:
                rel.append(Path(p).resolve().relative_to(root).as_posix())
            except ValueError:
                rel.append(str(Path(p).resolve()))
        out.append(f"{rel[0]}\t{rel[1]}\t{e.label}")
    path.write_text("\n".join(out) + "\n")
    return path


# --------------------------------------------------------------------------
# images


def read_raster(path) -> tuple[np.ndarray, int]:
    """Integer raster plus the maximum code value of its bit depth."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.array(im)
    except (OSError, SyntaxError, ValueError) as exc:
        raise MalformedImageError(f"{path}: {exc}") from exc
    if mode == "L":
        return arr.astype(np.int64), 255
    if mode.startswith("I;16") or mode == "I":
        return arr.astype(np.int64), 65535
    if mode == "1":
        return arr.astype(np.int64), 1
    raise MalformedImageError(f"{path}: expected 8/16-bit grayscale, got mode {mode}")


def read_image(path) -> np.ndarray:
    arr, top = read_raster(path)
    return arr.astype(np.float64) / top


def read_mask(path) -> np.ndarray:
    arr, top = read_raster(path)
    return (arr * 2 >= top).astype(np.uint8)


def write_image(path, image: np.ndarray, bits: int = 8) -> None:
    top = (1 << bits) - 1
    q = np.rint(np.clip(image, 0.0, 1.0) * top)
    Image.fromarray(q.astype(np.uint8 if bits == 8 else np.uint16)).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def load_sample(entry: ManifestEntry) -> Sample:
    return Sample(read_image(entry.image), read_mask(entry.mask), entry.label, entry.source_id)


def load_samples(manifest: DatasetManifest) -> list[Sample]:
    return [load_sample(e) for e in manifest.entries]


# --------------------------------------------------------------------------
# resampling


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float | None) -> np.ndarray:
    """Sample ``img`` at fractional coordinates; ``fill=None`` clamps to the border."""
    h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    def at(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        v = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return v if fill is None else np.where(inside, v, fill)

    return (
        at(y0, x0) * (1 - fy) * (1 - fx)
        + at(y0, x0 + 1) * (1 - fy) * fx
        + at(y0 + 1, x0) * fy * (1 - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
    )


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    ys = np.clip((np.arange(size) + 0.5) * h / size - 0.5, 0, h - 1)
    xs = np.clip((np.arange(size) + 0.5) * w / size - 0.5, 0, w - 1)
    return _bilinear(img, ys[:, None], xs[None, :], None)


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    ys = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return img[np.ix_(ys, xs)]


def resize_for_network(sample: Sample, size: int, channels: int = 3) -> Sample:
    """Squash to size x size (no aspect preservation); replicate grayscale across channels."""
    img = sample.image if sample.image.ndim == 2 else sample.image[0]
    out = resize_bilinear(img, size) if img.shape != (size, size) else img.astype(np.float64)
    mask = resize_nearest(sample.mask, size) if sample.mask.shape != (size, size) else sample.mask
    return replace(sample, image=np.repeat(out[None], channels, axis=0), mask=mask.astype(np.uint8))


def rotate(img: np.ndarray, angle_deg: float, nearest: bool = False) -> np.ndarray:
    """Rotate about the image centre; pixels mapped from outside the frame become 0."""
    h, w = img.shape
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source coordinate
    sy = c * (yy - cy) - s * (xx - cx) + cy
    sx = s * (yy - cy) + c * (xx - cx) + cx
    if nearest:
        iy, ix = np.rint(sy).astype(np.int64), np.rint(sx).astype(np.int64)
        inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        return np.where(inside, img[np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)], 0).astype(img.dtype)
    return _bilinear(img, sy, sx, 0.0)


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Network-ready samples -> (N x C x S x S images, N x 1 x S x S float masks)."""
    images = np.stack([s.image for s in samples]).astype(np.float64)
    masks = np.stack([s.mask for s in samples])[:, None].astype(np.float64)
    return images, masks


# --------------------------------------------------------------------------
# synthetic domains

DOMAINS = ("source", "general", "portable")


@dataclass(frozen=True)
class SynthSpec:
    domain: str = "general"
    count_per_class: int | dict = 10
    size: int = 64
    noise: float | None = None
    blur: float | None = None  # gaussian sigma in pixels at 64 x 64, scaled with size
    contrast: float | None = None
    artifact_prob: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown synthetic domain {self.domain!r}")
        counts = self.counts()
        if any(v < 0 for v in counts.values()) or sum(counts.values()) < 1:
            raise ValueError("count must be >= 1")
        if self.size < 8:
            raise ValueError("size must be >= 8")

    def counts(self) -> dict[str, int]:
        if isinstance(self.count_per_class, dict):
            unknown = set(self.count_per_class) - set(LABELS)
            if unknown:
                raise UnknownLabelError(f"unknown label(s) in counts: {sorted(unknown)}")
            return {k: int(self.count_per_class.get(k, 0)) for k in LABELS}
        if self.domain == "source":
            return {"normal": int(self.count_per_class)}
        return {k: int(self.count_per_class) for k in LABELS}

    def resolved(self) -> dict:
        defaults = {
            "source": dict(noise=0.05, blur=0.0, contrast=1.0, artifact_prob=0.0),
            "general": dict(noise=0.05, blur=0.0, contrast=1.0, artifact_prob=0.0),
            "portable": dict(noise=0.08, blur=2.0, contrast=0.6, artifact_prob=0.2),
        }[self.domain]
        return {k: (getattr(self, k) if getattr(self, k) is not None else v) for k, v in defaults.items()}


def _ellipse(size, cy, cx, ry, rx, angle_deg) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.deg2rad(angle_deg)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(t) + dy * np.sin(t)
    v = -dx * np.sin(t) + dy * np.cos(t)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _texture(rng, size, sigma) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return t / (np.abs(t).max() + 1e-12)


def _source_image(rng, S):
    # geometry drawn as integers (percent of S / whole degrees)
    ry, rx = rng.integers(15, 36, size=2) * S / 100
    cy, cx = rng.integers(38, 63, size=2) * S / 100
    angle = int(rng.integers(-45, 46))
    mask = _ellipse(S, cy, cx, ry, rx, angle)
    img = 0.2 + 0.12 * _texture(rng, S, S / 16)
    level = rng.integers(65, 90) / 100
    img = np.where(mask, level + 0.05 * _texture(rng, S, S / 20), img)
    return img, mask


def _lung_image(rng, S, label):
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) / S
    body = 0.72 + 0.08 * (1 - np.abs(xx - 0.5) * 2) - 0.06 * yy
    ribs = 0.05 * np.sin(2 * np.pi * yy * rng.integers(6, 10) + rng.integers(0, 360) * np.pi / 180)
    img = body + ribs + 0.04 * _texture(rng, S, S / 12)
    mask = np.zeros((S, S), dtype=bool)
    lungs = []
    for side in (0, 1):
        cx = (rng.integers(26, 34) if side == 0 else rng.integers(66, 74)) * S / 100
        cy = rng.integers(45, 56) * S / 100
        ry = rng.integers(25, 34) * S / 100
        rx = rng.integers(11, 16) * S / 100
        angle = int(rng.integers(-10, 11)) * (1 if side == 0 else -1)
        lung = _ellipse(S, cy, cx, ry, rx, angle)
        lungs.append((lung, cy, cx, ry, rx))
        mask |= lung
    dark = rng.integers(18, 30) / 100
    img = np.where(mask, dark + 0.3 * ribs + 0.04 * _texture(rng, S, S / 14), img)

    if label == "covid":
        # patchy lattice of bright opacities, strongest towards the lung bases
        f = rng.integers(5, 9)
        lattice = np.clip(np.sin(2 * np.pi * f * xx) * np.sin(2 * np.pi * f * yy), 0, None)
        weight = np.zeros((S, S))
        for lung, cy, cx, ry, rx in lungs:
            weight += lung * np.clip((yy * S - (cy - ry)) / (2 * ry), 0, 1)
        img = img + 0.35 * lattice * weight
    elif label == "pathological":
        for lung, cy, cx, ry, rx in lungs:
            for _ in range(int(rng.integers(1, 3))):
                py = cy + rng.integers(-50, 51) / 100 * ry
                px = cx + rng.integers(-50, 51) / 100 * rx
                sig = rng.integers(6, 11) * S / 100
                blob = np.exp(-((yy * S - py) ** 2 + (xx * S - px) ** 2) / (2 * sig**2))
                img = img + 0.3 * blob * lung
    return img, mask


def synth_sample(spec: SynthSpec, index: int, label: str) -> Sample:
    """One deterministic sample; geometry depends only on (seed, domain, index)."""
    S = spec.size
    p = spec.resolved()
    dom = DOMAINS.index(spec.domain)
    # portable draws share geometry with the general domain at equal seeds
    geo = np.random.default_rng([spec.seed, min(dom, 1), index])
    if spec.domain == "source":
        img, mask = _source_image(geo, S)
    else:
        img, mask = _lung_image(geo, S, label)
    rng = np.random.default_rng([spec.seed, dom, index, 7])
    # acquisition noise belongs to the base recipe, so the portable
    # degradation below blurs it along with the anatomy
    img = img + p["noise"] * rng.standard_normal((S, S))
    if p["blur"] > 0:
        img = ndimage.gaussian_filter(img, p["blur"] * S / 64, mode="nearest")
    if p["contrast"] != 1.0:
        img = p["contrast"] * img + (1 - p["contrast"]) * 0.55
    if p["artifact_prob"] > 0 and rng.random() < p["artifact_prob"]:
        top = int(rng.integers(10, 80)) * S // 100
        height = max(1, int(rng.integers(6, 13)) * S // 100)
        img[top : top + height] += 0.35
    return Sample(np.clip(img, 0.0, 1.0), mask.astype(np.uint8), label, f"{spec.domain}_{index:05d}")


def synth_samples(spec: SynthSpec) -> list[Sample]:
    out = []
    index = 0
    for label, n in spec.counts().items():
        for _ in range(n):
            out.append(synth_sample(spec, index, label))
            index += 1
    return out


def generate_synthetic(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write images/, masks/ and manifest.txt under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in synth_samples(spec):
        ip = out_dir / "images" / f"{s.source_id}.png"
        mp = out_dir / "masks" / f"{s.source_id}.png"
        write_image(ip, s.image)
        write_mask(mp, s.mask)
        entries.append(ManifestEntry(ip, mp, s.label))
    manifest = DatasetManifest(entries, spec.domain)
    save_manifest(manifest, out_dir / "manifest.txt")
    manifest.path = out_dir / "manifest.txt"
    return manifest
