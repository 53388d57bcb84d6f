"""Procedurally generated multi-attack face benchmark.

Bona fide images are seeded face-like composites (smooth background, shaded
elliptical head, eye/mouth blobs, band-limited texture), quantized to the
usual 8-bit grid and normalized to [-1, 1].  Nine attack families -- three
per semantic category -- perturb bona fides with deliberately heterogeneous
signal statistics: additive high-frequency noise on the adversarial side,
structural/color edits for manipulations, and low-frequency/occlusion
artifacts for spoofs.  Every sample is a pure function of (master_seed,
config, sample_seed), so datasets regenerate bit-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

SPLITS = ("train", "val", "test")
CATEGORIES = ("adversarial_like", "manipulation_like", "spoof_like")

_DONOR_BIT = 1 << 48
_CACHE_MAGIC = b"UFAD"


class ConfigError(ValueError):
    """Invalid dataset configuration."""


class PreconditionError(ValueError):
    """Operation called on a sample that violates its precondition."""


@dataclass(frozen=True)
class AttackTypeSpec:
    type_id: int
    name: str
    category: str
    transform_params: dict


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # H,W,C float32 in [-1, 1]
    label: int
    attack_type: int | None
    split: str
    sample_seed: int


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 64
    channels: int = 3
    num_types: int = 9
    bona_fide: dict = field(
        default_factory=lambda: {"train": 1200, "val": 400, "test": 600}
    )
    attacks_per_type: dict = field(
        default_factory=lambda: {"train": 130, "val": 45, "test": 70}
    )
    master_seed: int = 0
    holdout_types: tuple = ()  # excluded from train/val, kept in test

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigError(
                f"image_size must be >= 16 and divisible by 16 (four stride-2 "
                f"conv layers), got {self.image_size}"
            )
        if self.channels != 3:
            raise ConfigError("only 3-channel images are supported")
        if self.num_types < 1:
            raise ConfigError("need at least one attack type")
        for d in (self.bona_fide, self.attacks_per_type):
            for s in SPLITS:
                if s not in d or d[s] < 0:
                    raise ConfigError(f"missing/negative count for split {s!r}")
        bad = [t for t in self.holdout_types if not 0 <= t < self.num_types]
        if bad:
            raise ConfigError(f"holdout_types out of range: {bad}")

    def with_holdout(self, holdout_types):
        return replace(self, holdout_types=tuple(sorted(holdout_types)))


# ---------------------------------------------------------------------------
# attack families


def _unit(x):
    return (x + 1.0) / 2.0


def _from_unit(u):
    return u * 2.0 - 1.0


def _grids(size):
    ax = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(ax, ax)  # xx (columns), yy (rows)


def _atk_sign_noise(x, rng, p, donor):
    n = rng.standard_normal(x.shape)
    return x + p["eps"] * np.where(n >= 0, 1.0, -1.0)


def _atk_pixel_flip(x, rng, p, donor):
    h, w, _ = x.shape
    k = max(1, int(round(p["frac"] * h * w)))
    pos = rng.choice(h * w, size=k, replace=False)
    out = x.copy()
    flat = out.reshape(h * w, -1)
    flat[pos] = -flat[pos]
    return out


def _atk_hf_sine(x, rng, p, donor):
    size = x.shape[0]
    xx, yy = _grids(size)
    theta = rng.uniform(0, np.pi)
    cycles = p["cycles_frac"] * size
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(np.pi * cycles * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return x + p["amp"] * wave[..., None]


def _atk_warp(x, rng, p, donor):
    size = x.shape[0]
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    sigma = p["sigma_frac"] * size
    dr = np.zeros((size, size))
    dc = np.zeros((size, size))
    for _ in range(int(p.get("bumps", 1))):
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)
        bump = np.exp(-((rr - cy) ** 2 + (cc - cx) ** 2) / (2 * sigma**2))
        psi = rng.uniform(0, 2 * np.pi)
        dr += p["shift"] * np.sin(psi) * bump
        dc += p["shift"] * np.cos(psi) * bump
    out = np.empty_like(x)
    for ch in range(x.shape[2]):
        out[..., ch] = map_coordinates(
            x[..., ch], [rr + dr, cc + dc], order=1, mode="reflect"
        )
    return out


_PERMS = ((0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


def _atk_channel_mix(x, rng, p, donor):
    perm = _PERMS[rng.integers(len(_PERMS))]
    return (1 - p["alpha"]) * x + p["alpha"] * x[..., perm]


def _atk_patch_blend(x, rng, p, donor):
    if donor is None:
        raise PreconditionError("patch_blend requires a donor bona fide image")
    size = x.shape[0]
    ps = max(2, int(round(p["frac"] * size)))
    top = rng.integers(0, size - ps + 1)
    left = rng.integers(0, size - ps + 1)
    out = x.copy()
    region = out[top : top + ps, left : left + ps]
    out[top : top + ps, left : left + ps] = (
        (1 - p["beta"]) * region + p["beta"] * donor[top : top + ps, left : left + ps]
    )
    return out


def _atk_blur_bands(x, rng, p, donor):
    blurred = gaussian_filter(x, sigma=(p["sigma"], p["sigma"], 0), mode="nearest")
    size = x.shape[0]
    rows = np.arange(size)
    phase = rng.uniform(0, 2 * np.pi)
    band = 1.0 + p["band_amp"] * np.sin(2 * np.pi * rows / p["period"] + phase)
    return _from_unit(_unit(blurred) * band[:, None, None])


def _atk_moire(x, rng, p, donor):
    size = x.shape[0]
    xx, yy = _grids(size)
    theta = rng.uniform(-0.25, 0.25)
    cyc = p["cycles_frac"] * size
    phase1, phase2 = rng.uniform(0, 2 * np.pi, 2)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    v = -np.sin(theta) * xx + np.cos(theta) * yy
    grid = np.sin(np.pi * cyc * u + phase1) * np.sin(np.pi * cyc * v + phase2)
    return _from_unit(_unit(x) * (1.0 + p["amp"] * grid[..., None]))


def _atk_matte_patch(x, rng, p, donor):
    size = x.shape[0]
    xx, yy = _grids(size)
    cx, cy = rng.uniform(-0.4, 0.4, 2)
    rx = p["frac"] * rng.uniform(0.75, 1.25)
    ry = p["frac"] * rng.uniform(0.75, 1.25)
    d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    m = 1.0 / (1.0 + np.exp(np.minimum((d - 1.0) / 0.05, 60.0)))
    shade = rng.uniform(-0.25, 0.45)
    color = shade + rng.normal(0, 0.02, 3)
    a = p["alpha"] * m[..., None]
    return x * (1 - a) + color * a


# family -> (category, transform, parameter variants strongest-first)
FAMILIES = {
    "sign_noise": (
        "adversarial_like",
        _atk_sign_noise,
        [{"eps": 8 / 128}, {"eps": 4 / 128}, {"eps": 2 / 128}],
    ),
    "pixel_flip": (
        "adversarial_like",
        _atk_pixel_flip,
        [{"frac": 0.02}, {"frac": 0.01}, {"frac": 0.04}],
    ),
    "hf_sine": (
        "adversarial_like",
        _atk_hf_sine,
        [
            {"amp": 5 / 128, "cycles_frac": 0.36},
            {"amp": 3.5 / 128, "cycles_frac": 0.30},
            {"amp": 8 / 128, "cycles_frac": 0.42},
        ],
    ),
    "local_warp": (
        "manipulation_like",
        _atk_warp,
        [
            {"shift": 6.0, "sigma_frac": 0.3, "bumps": 2},
            {"shift": 4.0, "sigma_frac": 0.24, "bumps": 2},
            {"shift": 7.5, "sigma_frac": 0.36, "bumps": 3},
        ],
    ),
    "channel_mix": (
        "manipulation_like",
        _atk_channel_mix,
        [{"alpha": 0.55}, {"alpha": 0.38}, {"alpha": 0.75}],
    ),
    "patch_blend": (
        "manipulation_like",
        _atk_patch_blend,
        [
            {"frac": 0.36, "beta": 0.95},
            {"frac": 0.27, "beta": 0.8},
            {"frac": 0.46, "beta": 1.0},
        ],
    ),
    "blur_bands": (
        "spoof_like",
        _atk_blur_bands,
        [
            {"sigma": 1.0, "band_amp": 0.1, "period": 6.3},
            {"sigma": 0.8, "band_amp": 0.07, "period": 8.1},
            {"sigma": 1.4, "band_amp": 0.14, "period": 5.2},
        ],
    ),
    "moire": (
        "spoof_like",
        _atk_moire,
        [
            {"amp": 0.1, "cycles_frac": 0.18},
            {"amp": 0.07, "cycles_frac": 0.14},
            {"amp": 0.15, "cycles_frac": 0.24},
        ],
    ),
    "matte_patch": (
        "spoof_like",
        _atk_matte_patch,
        [
            {"frac": 0.26, "alpha": 0.9},
            {"frac": 0.2, "alpha": 0.8},
            {"frac": 0.34, "alpha": 0.96},
        ],
    ),
}

_FAMILY_ORDER = [
    # round-robin over categories so any prefix of the list is mixed
    "sign_noise", "local_warp", "blur_bands",
    "pixel_flip", "channel_mix", "moire",
    "hf_sine", "patch_blend", "matte_patch",
]


def default_attack_types(num_types=9):
    """Attack type table: 9 base families, parameter variants beyond that."""
    types = []
    for i in range(num_types):
        family = _FAMILY_ORDER[i % len(_FAMILY_ORDER)]
        variant = i // len(_FAMILY_ORDER)
        category, _, param_sets = FAMILIES[family]
        params = param_sets[variant % len(param_sets)]
        name = family if variant == 0 else f"{family}_v{variant}"
        types.append(AttackTypeSpec(i, name, category, dict(params)))
    return types


# ---------------------------------------------------------------------------
# bona fide synthesis


def _gen_face(rng, size):
    """One face-like composite in [-1, 1], 8-bit quantized."""
    xx, yy = _grids(size)
    base = rng.uniform(0.3, 0.7)
    gx, gy = rng.normal(0, 0.15, 2)
    bg = base + gx * xx + gy * yy
    img = bg[..., None] + rng.normal(0, 0.05, 3)

    cx, cy = rng.uniform(-0.12, 0.12, 2)
    rx, ry = rng.uniform(0.48, 0.62), rng.uniform(0.6, 0.78)
    th = rng.uniform(-0.18, 0.18)
    xr = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
    yr = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
    d = (xr / rx) ** 2 + (yr / ry) ** 2
    mask = 1.0 / (1.0 + np.exp(np.minimum((d - 1.0) / 0.08, 60.0)))

    r = rng.uniform(0.45, 0.85)
    tone = np.array([r, r * rng.uniform(0.72, 0.9), r * rng.uniform(0.55, 0.8)])
    shading = 1.0 - rng.uniform(0.25, 0.45) * np.clip(d, 0, 1.5)
    face = tone * shading[..., None]

    # eyes and mouth as dark blobs, roughly symmetric
    ex = rng.uniform(0.3, 0.42) * rx
    ey = cy - rng.uniform(0.18, 0.3) * ry
    depth = rng.uniform(0.25, 0.5)
    esg = rng.uniform(0.05, 0.09)
    for sx in (-1.0, 1.0):
        blob = np.exp(-((xx - (cx + sx * ex)) ** 2 + (yy - ey) ** 2) / (2 * esg**2))
        face = face * (1.0 - depth * blob[..., None])
    my = cy + rng.uniform(0.38, 0.52) * ry
    mw = rng.uniform(0.2, 0.3) * rx
    mouth = np.exp(-((xx - cx) ** 2 / (2 * mw**2) + (yy - my) ** 2 / (2 * 0.035**2)))
    face = face * (1.0 - rng.uniform(0.2, 0.4) * mouth[..., None])

    img = img * (1.0 - mask[..., None]) + face * mask[..., None]
    tex = gaussian_filter(rng.normal(0, 1.0, (size, size)), rng.uniform(1.2, 2.5))
    img += rng.uniform(0.015, 0.05) * tex[..., None]

    v255 = np.rint(np.clip(img, 0.0, 1.0) * 255.0)
    return np.clip((v255 - 128.0) / 128.0, -1.0, 1.0).astype(np.float32)


def _sample_seed(split, counter, donor=False):
    idx = SPLITS.index(split)
    return (idx << 56) | (_DONOR_BIT if donor else 0) | counter


def _base_rng(master_seed, sample_seed):
    return np.random.default_rng(
        np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, sample_seed, 0])
    )


def _attack_seed(master_seed, sample_seed):
    ss = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, sample_seed, 1])
    return int(ss.generate_state(1, np.uint64)[0])


def gen_bona_fide(config, split, n, counter_start=0):
    """n seeded bona fide samples from the split's own seed range."""
    if n < 0:
        raise ConfigError("negative sample count")
    out = []
    for i in range(n):
        seed = _sample_seed(split, counter_start + i)
        pixels = _gen_face(_base_rng(config.master_seed, seed), config.image_size)
        out.append(ImageSample(pixels, 0, None, split, seed))
    return out


def apply_attack(sample, spec, seed, donor=None):
    """Perturb a bona fide sample into an attack of the given type.

    `seed` fully determines the perturbation.  `donor` (H,W,C array) is only
    consulted by families that splice content from a second bona fide.
    """
    if sample.label != 0:
        raise PreconditionError(
            f"sample {sample.sample_seed} is already an attack "
            f"(type {sample.attack_type})"
        )
    _, transform, _ = FAMILIES[_family_of(spec.name)]
    rng = np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0xA77AC4])
    )
    pixels = transform(
        sample.pixels.astype(np.float64), rng, spec.transform_params, donor
    )
    pixels = np.clip(pixels, -1.0, 1.0).astype(np.float32)
    return ImageSample(pixels, 1, spec.type_id, sample.split, sample.sample_seed)


def _family_of(type_name):
    return type_name.split("_v")[0] if "_v" in type_name else type_name


@dataclass
class Split:
    x: np.ndarray  # N,H,W,C float32
    labels: np.ndarray  # N int8
    attack_types: np.ndarray  # N int16; -1 for bona fide
    seeds: np.ndarray  # N int64

    def __len__(self):
        return len(self.labels)

    def subset(self, mask):
        return Split(self.x[mask], self.labels[mask], self.attack_types[mask],
                     self.seeds[mask])


class SynthDataset:
    """Materialized benchmark with manifest records per sample."""

    def __init__(self, config):
        self.config = config
        self.types = default_attack_types(config.num_types)
        self.splits = {}
        self.records = []
        for split in SPLITS:
            self._build_split(split)

    def _present_types(self, split):
        if split == "test":
            return self.types
        return [t for t in self.types if t.type_id not in self.config.holdout_types]

    def _build_split(self, split):
        cfg = self.config
        counter = 0
        xs, labels, atk, seeds = [], [], [], []

        bona = gen_bona_fide(cfg, split, cfg.bona_fide[split])
        counter += cfg.bona_fide[split]
        for s in bona:
            xs.append(s.pixels)
            labels.append(0)
            atk.append(-1)
            seeds.append(s.sample_seed)
            self.records.append(_record(s, None))

        n_per = cfg.attacks_per_type[split]
        for spec in self._present_types(split):
            for _ in range(n_per):
                seed = _sample_seed(split, counter)
                base = ImageSample(
                    _gen_face(_base_rng(cfg.master_seed, seed), cfg.image_size),
                    0, None, split, seed,
                )
                donor = None
                if _family_of(spec.name) == "patch_blend":
                    dseed = _sample_seed(split, counter, donor=True)
                    donor = _gen_face(_base_rng(cfg.master_seed, dseed), cfg.image_size)
                attacked = apply_attack(
                    base, spec, _attack_seed(cfg.master_seed, seed), donor=donor
                )
                counter += 1
                xs.append(attacked.pixels)
                labels.append(1)
                atk.append(spec.type_id)
                seeds.append(seed)
                self.records.append(_record(attacked, spec))

        self.splits[split] = Split(
            np.stack(xs) if xs else np.zeros(
                (0, cfg.image_size, cfg.image_size, cfg.channels), np.float32
            ),
            np.array(labels, np.int8),
            np.array(atk, np.int16),
            np.array(seeds, np.int64),
        )

    def split(self, name):
        return self.splits[name]

    def category_of(self):
        return {t.type_id: t.category for t in self.types}

    def type_names(self):
        return {t.type_id: t.name for t in self.types}


def _record(sample, spec):
    return {
        "sample_seed": int(sample.sample_seed),
        "split": sample.split,
        "label": int(sample.label),
        "attack_type": None if spec is None else int(spec.type_id),
        "family_params": None if spec is None else dict(spec.transform_params),
    }


def make_dataset(config):
    return SynthDataset(config)


def write_manifest(path, dataset):
    with open(path, "w") as fh:
        for rec in dataset.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_tensor_cache(path, x):
    """Flat little-endian float32 dump with a 16-byte header."""
    x = np.ascontiguousarray(x, dtype="<f4")
    n, h, w, c = x.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(x.tobytes())


def read_tensor_cache(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        h, w, c = struct.unpack("<III", fh.read(12))
        body = fh.read()
    arr = np.frombuffer(body, dtype="<f4")
    if arr.size % (h * w * c):
        raise ValueError(f"{path}: truncated tensor cache")
    return arr.reshape(-1, h, w, c).astype(np.float32)
