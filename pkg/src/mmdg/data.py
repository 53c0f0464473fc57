"""Synthetic multi-modal face data and a manifest loader for prepared data.

Each sample has three aligned 32×32×3 images (RGB, depth, infrared; the last
two are single-channel renders replicated to three channels).  Live faces are
smooth blob compositions.  A spoof additionally carries a periodic texture in
the modalities its attack type exposes, so no single modality sees every
attack.  Domains differ in palette, gain, noise and in how often the depth and
infrared renders are stamped with high-noise patches.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import LIVE, SPOOF
from .rng import stream
from .uem import MODALITIES

# attack type -> modalities carrying its texture signature
ATTACKS = {"print": ("R", "D"), "replay": ("R", "I"), "mask": ("D", "I")}
_ATTACK_NAMES = tuple(ATTACKS)

_RENDER, _SPOOF, _CORRUPT = 1, 2, 3


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    prob: float = 0.0
    patch: int = 8
    amplitude: float = 0.5
    n_patches: int = 2

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"corruption probability must lie in [0, 1], got {self.prob}")
        if self.amplitude < 0:
            raise ValueError("corruption amplitude must be nonnegative")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    palette: tuple[float, float, float] = (0.65, 0.5, 0.4)
    background: tuple[float, float, float] = (0.25, 0.25, 0.3)
    gain: dict = field(default_factory=lambda: {"R": 1.0, "D": 1.0, "I": 1.0})
    noise: dict = field(default_factory=lambda: {"R": 0.02, "D": 0.02, "I": 0.02})
    signature_freq: dict = field(default_factory=lambda: {"R": (8, 0), "D": (0, 8), "I": (8, 8)})
    signature_amp: dict = field(default_factory=lambda: {"R": 0.08, "D": 0.08, "I": 0.08})
    attack_mix: dict = field(default_factory=lambda: {"print": 1 / 3, "replay": 1 / 3, "mask": 1 / 3})
    corruption: dict = field(default_factory=lambda: {"D": CorruptionSpec(), "I": CorruptionSpec()})

    def __post_init__(self):
        if any(v < 0 for v in self.noise.values()):
            raise ValueError("noise levels must be nonnegative")
        if set(self.attack_mix) - set(ATTACKS):
            raise ValueError(f"unknown attack types {set(self.attack_mix) - set(ATTACKS)}")

    @property
    def key(self) -> int:
        return zlib.crc32(self.name.encode())


def _preset(name, palette, background, gain, noise, amp, mix, corrupt_d, corrupt_i) -> DomainSpec:
    return DomainSpec(
        name=name, palette=palette, background=background,
        gain=dict(zip(MODALITIES, gain)), noise=dict(zip(MODALITIES, noise)),
        signature_amp=dict(zip(MODALITIES, amp)),
        attack_mix=dict(zip(_ATTACK_NAMES, mix)),
        corruption={"D": CorruptionSpec(prob=corrupt_d), "I": CorruptionSpec(prob=corrupt_i)},
    )


# Four stand-ins for the four benchmark datasets; the numbers are invented.
PRESETS: dict[str, DomainSpec] = {
    "c": _preset("c", (0.70, 0.52, 0.42), (0.20, 0.22, 0.28), (1.00, 1.00, 0.90),
                 (0.02, 0.03, 0.03), (0.10, 0.08, 0.08), (0.4, 0.3, 0.3), 0.3, 0.1),
    "p": _preset("p", (0.55, 0.45, 0.40), (0.35, 0.30, 0.25), (0.90, 0.85, 1.10),
                 (0.02, 0.02, 0.04), (0.10, 0.08, 0.08), (0.3, 0.4, 0.3), 0.1, 0.3),
    "s": _preset("s", (0.60, 0.60, 0.55), (0.15, 0.15, 0.15), (0.75, 1.10, 1.00),
                 (0.03, 0.04, 0.02), (0.10, 0.08, 0.08), (0.3, 0.3, 0.4), 0.2, 0.2),
    "w": _preset("w", (0.50, 0.40, 0.35), (0.30, 0.35, 0.30), (1.10, 0.90, 0.95),
                 (0.02, 0.03, 0.03), (0.10, 0.08, 0.08), (0.2, 0.3, 0.5), 0.3, 0.3),
}


@dataclass
class MultiModalDataset:
    """Aligned arrays; ``images[m]`` is N×H×W×3."""

    images: dict[str, np.ndarray]
    labels: np.ndarray
    domain: np.ndarray                  # dataset id per sample (string)
    subject: np.ndarray
    attack: np.ndarray = None           # attack name, "" for live
    corrupted: np.ndarray = None        # N×3 bool, per modality

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "MultiModalDataset":
        idx = np.asarray(idx)
        opt = lambda a: None if a is None else a[idx]  # noqa: E731
        return MultiModalDataset({m: v[idx] for m, v in self.images.items()}, self.labels[idx],
                                 self.domain[idx], self.subject[idx], opt(self.attack), opt(self.corrupted))

    @staticmethod
    def concat(parts) -> "MultiModalDataset":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")

        def cat(getter):
            vals = [getter(p) for p in parts]
            return None if any(v is None for v in vals) else np.concatenate(vals)
        return MultiModalDataset({m: np.concatenate([p.images[m] for p in parts]) for m in MODALITIES},
                                 cat(lambda p: p.labels), cat(lambda p: p.domain), cat(lambda p: p.subject),
                                 cat(lambda p: p.attack), cat(lambda p: p.corrupted))


# -- rendering ------------------------------------------------------------------

def _blob(yy, xx, cy, cx, sy, sx):
    return np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))


def _face_layers(rng: np.random.Generator, size: int):
    """Face mask (0..1) and depth-like bump for one subject."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = size / 2.0
    cy, cx = c + rng.normal(0, size * 0.04, 2)
    sy, sx = size * rng.uniform(0.24, 0.30), size * rng.uniform(0.18, 0.24)
    face = _blob(yy, xx, cy, cx, sy, sx)
    # eyes and mouth as small darker blobs
    feat = (_blob(yy, xx, cy - 0.25 * sy, cx - 0.4 * sx, 1.5, 2.0)
            + _blob(yy, xx, cy - 0.25 * sy, cx + 0.4 * sx, 1.5, 2.0)
            + _blob(yy, xx, cy + 0.5 * sy, cx, 1.2, 3.0))
    bump = _blob(yy, xx, cy, cx, sy * 0.9, sx * 0.9) + 0.3 * _blob(yy, xx, cy, cx, 2.5, 1.8)
    return face, feat, bump


def signature(size: int, freq) -> np.ndarray:
    """Cosine texture ``cos(2*pi*(fx*x + fy*y)/size)``."""
    fx, fy = freq
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.cos(2.0 * np.pi * (fx * xx + fy * yy) / size)


def band_amplitude(img: np.ndarray, freq) -> float:
    """Amplitude of the ``freq`` cosine/sine component, averaged over channels (direct sum, no FFT)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    size = img.shape[0]
    fx, fy = freq
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = 2.0 * np.pi * (fx * xx + fy * yy) / size
    c = np.tensordot(np.cos(phase), img, axes=([0, 1], [0, 1]))
    s = np.tensordot(np.sin(phase), img, axes=([0, 1], [0, 1]))
    # a pure cosine of amplitude a at a nonzero frequency has |sum| = a*N^2/2
    return float(np.mean(2.0 * np.hypot(c, s) / size ** 2))


def _render_clean(spec: DomainSpec, sample_seed: int, idx: int, spoof: bool, attack: str,
                  size: int) -> dict[str, np.ndarray]:
    rng = stream(sample_seed, spec.key, idx, _RENDER)
    face, feat, bump = _face_layers(rng, size)
    pal = np.asarray(spec.palette) * rng.uniform(0.9, 1.1, 3)
    bg = np.asarray(spec.background)
    rgb = bg + (pal - bg) * face[..., None] - 0.15 * feat[..., None]
    rgb = spec.gain["R"] * rgb + rng.normal(0, spec.noise["R"], rgb.shape)
    depth = spec.gain["D"] * 0.6 * bump + 0.1
    depth = depth + rng.normal(0, spec.noise["D"], depth.shape)
    ir = spec.gain["I"] * (0.15 + 0.5 * face - 0.1 * feat)
    ir = ir + rng.normal(0, spec.noise["I"], ir.shape)
    imgs = {"R": rgb, "D": np.repeat(depth[..., None], 3, axis=-1), "I": np.repeat(ir[..., None], 3, axis=-1)}
    if spoof:
        for m in ATTACKS[attack]:
            tex = spec.signature_amp[m] * signature(size, spec.signature_freq[m])
            imgs[m] = imgs[m] + tex[..., None]
    return imgs


def _corrupt(img: np.ndarray, cspec: CorruptionSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stamp noisy square patches; returns the image and the stamped-pixel mask."""
    size = img.shape[0]
    mask = np.zeros(img.shape[:2], dtype=bool)
    out = img.copy()
    for _ in range(cspec.n_patches):
        y, x = rng.integers(0, size - cspec.patch + 1, 2)
        mask[y:y + cspec.patch, x:x + cspec.patch] = True
    noise = rng.normal(0.0, cspec.amplitude, img.shape[:2])
    out[mask] = out[mask] + noise[mask][:, None]
    return out, mask


def render_sample(spec: DomainSpec, seed: int, idx: int, spoof: bool, attack: str = "",
                  size: int = 32, corrupt: bool = True) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One sample's three images (clipped to [0, 1]) and per-modality corruption masks."""
    imgs = _render_clean(spec, seed, idx, spoof, attack, size)
    masks = {m: np.zeros((size, size), dtype=bool) for m in MODALITIES}
    if corrupt:
        for m in ("D", "I"):
            cspec = spec.corruption.get(m, CorruptionSpec())
            rng = stream(seed, spec.key, idx, _CORRUPT * 16 + MODALITIES.index(m))
            if cspec.prob > 0 and rng.random() < cspec.prob:
                imgs[m], masks[m] = _corrupt(imgs[m], cspec, rng)
    return {m: np.clip(v, 0.0, 1.0) for m, v in imgs.items()}, masks


def generate_domain(spec: DomainSpec, n_live: int, n_spoof: int, seed: int = 0,
                    size: int = 32) -> MultiModalDataset:
    """Render ``n_live`` live and ``n_spoof`` spoof samples; reproducible from ``(spec, seed)``."""
    if n_live < 1 or n_spoof < 1:
        raise ValueError("need at least one live and one spoof sample")
    n = n_live + n_spoof
    mix_names = list(spec.attack_mix)
    mix_p = np.asarray([spec.attack_mix[a] for a in mix_names], dtype=np.float64)
    mix_p = mix_p / mix_p.sum()
    pick = stream(seed, spec.key, 0, _SPOOF)
    attacks = [""] * n_live + [mix_names[k] for k in pick.choice(len(mix_names), size=n_spoof, p=mix_p)]
    images = {m: np.empty((n, size, size, 3)) for m in MODALITIES}
    corrupted = np.zeros((n, len(MODALITIES)), dtype=bool)
    for i in range(n):
        imgs, masks = render_sample(spec, seed, i, i >= n_live, attacks[i], size)
        for k, m in enumerate(MODALITIES):
            images[m][i] = imgs[m]
            corrupted[i, k] = masks[m].any()
    labels = np.array([LIVE] * n_live + [SPOOF] * n_spoof, dtype=np.int64)
    return MultiModalDataset(images, labels, np.array([spec.name] * n), np.arange(n),
                             np.array(attacks), corrupted)


def generate_domains(names=("c", "p", "s", "w"), n_live: int = 32, n_spoof: int = 32, seed: int = 0,
                     size: int = 32, presets: dict | None = None) -> dict[str, MultiModalDataset]:
    presets = presets or PRESETS
    return {n: generate_domain(presets[n], n_live, n_spoof, seed, size) for n in names}


# -- binary image container -------------------------------------------------------

def write_image(path, img: np.ndarray) -> None:
    """``<u64 H><u64 W><u64 C>`` then little-endian float64 payload."""
    img = np.asarray(img, dtype="<f8")
    if img.ndim == 2:
        img = img[..., None]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQQ", *img.shape))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise ManifestError(f"truncated image container: {path}")
    h, w, c = struct.unpack_from("<QQQ", raw)
    if len(raw) != 24 + 8 * h * w * c:
        raise ManifestError(f"payload size mismatch in {path}")
    return np.frombuffer(raw, dtype="<f8", offset=24).reshape(h, w, c).astype(np.float64)


# -- manifests ----------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    rgb: Path
    depth: Path
    ir: Path
    label: int
    dataset: str
    subject: str


def export_dataset(ds: MultiModalDataset, out_dir, manifest_name: str = "manifest.tsv") -> Path:
    """Write every image as a container file and a tab-separated manifest pointing at them."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(ds)):
        stem = f"{ds.domain[i]}_{int(ds.subject[i]):05d}"
        paths = []
        for m, tag in zip(MODALITIES, ("rgb", "depth", "ir")):
            p = img_dir / f"{stem}_{tag}.bin"
            write_image(p, ds.images[m][i])
            paths.append(str(p.relative_to(out_dir)))
        label = "live" if ds.labels[i] == LIVE else "spoof"
        lines.append("\t".join([*paths, label, str(ds.domain[i]), str(ds.subject[i])]))
    manifest = out_dir / manifest_name
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest


def parse_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ManifestError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(fields)}")
        rgb, depth, ir, label, dataset, subject = fields
        if label not in ("live", "spoof"):
            raise ManifestError(f"{path}:{lineno}: label must be 'live' or 'spoof', got {label!r}")
        if not dataset:
            raise ManifestError(f"{path}:{lineno}: empty dataset id")
        paths = []
        for p in (rgb, depth, ir):
            full = Path(p) if Path(p).is_absolute() else base / p
            if not full.exists():
                raise ManifestError(f"{path}:{lineno}: missing file {full}")
            paths.append(full)
        records.append(ManifestRecord(*paths, LIVE if label == "live" else SPOOF, dataset, subject))
    return records


def _load_any(path: Path) -> np.ndarray:
    if path.suffix == ".bin":
        return read_image(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def _prepare(img: np.ndarray, size: int) -> np.ndarray:
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    elif img.shape[-1] == 4:
        img = img[..., :3]
    if img.max(initial=0.0) > 1.0:
        img = img / 255.0
    if img.shape[:2] != (size, size):
        from scipy.ndimage import zoom

        img = zoom(img, (size / img.shape[0], size / img.shape[1], 1), order=1)
    return img


class ManifestDataset:
    """Lazily loaded manifest records."""

    def __init__(self, path, image_size: int = 32):
        self.records = parse_manifest(path)
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> tuple[dict[str, np.ndarray], int, str]:
        r = self.records[i]
        imgs = {m: _prepare(_load_any(p), self.image_size) for m, p in zip(MODALITIES, (r.rgb, r.depth, r.ir))}
        return imgs, r.label, r.dataset

    def materialize(self) -> MultiModalDataset:
        n, s = len(self), self.image_size
        images = {m: np.empty((n, s, s, 3)) for m in MODALITIES}
        labels, domains, subjects = [], [], []
        for i in range(n):
            imgs, label, dataset = self[i]
            for m in MODALITIES:
                images[m][i] = imgs[m]
            labels.append(label)
            domains.append(dataset)
            subjects.append(self.records[i].subject)
        return MultiModalDataset(images, np.asarray(labels, dtype=np.int64), np.asarray(domains, dtype=object if n == 0 else None),
                                 np.asarray(subjects))


def load_manifest(path, image_size: int = 32) -> ManifestDataset:
    return ManifestDataset(path, image_size)


def with_corruption(spec: DomainSpec, prob: float) -> DomainSpec:
    return replace(spec, corruption={m: replace(c, prob=prob) for m, c in spec.corruption.items()})
