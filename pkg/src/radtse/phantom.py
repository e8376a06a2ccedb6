"""Seeded synthetic abdominal phantoms: tissue label maps built from smoothed
random ellipse unions, a tissue table (proton density, T2), the ground-truth
liver mask, and optional low-order multiplicative bias fields.

``difficulty="t2_only"`` guarantees at least one distractor organ whose proton
density matches the liver's within 5% while its T2 differs by at least 30%,
so liver/distractor contrast survives in the T2 map but is weak in images
whose intensity tracks proton density.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError

BACKGROUND_ID = 0
BODY_ID = 1
LIVER_ID = 2

# Literature-typical 1.5T magnitudes; defaults only, configurable per phantom.
LIVER_T2_MS = 45.0
BODY_T2_MS = 65.0
DISTRACTOR_PALETTE = (
    ("spleen", 1.15, 80.0),
    ("fat", 1.30, 90.0),
    ("fluid", 0.70, 300.0),
    ("muscle", 1.22, 30.0),
)


@dataclass(frozen=True)
class TissueClass:
    name: str
    pd: float
    t2_ms: float

    def __post_init__(self):
        if not self.pd > 0:
            raise ValidationError(f"tissue {self.name!r}: pd must be > 0")
        if not 0 < self.t2_ms <= 2000:
            raise ValidationError(f"tissue {self.name!r}: t2_ms must be in (0, 2000]")


@dataclass
class Phantom:
    labels: np.ndarray                 # (H, W) uint8 tissue ids
    tissue_table: list[TissueClass]
    liver_id: int
    bias: np.ndarray | None = None     # (H, W) positive, spatial mean 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        ids = np.unique(self.labels)
        if ids.max(initial=0) >= len(self.tissue_table):
            raise ValidationError("label id without a tissue_table entry")
        if not (self.labels == self.liver_id).any():
            raise ValidationError("liver mask is empty")
        if self.bias is not None:
            if self.bias.shape != self.labels.shape:
                raise ValidationError("bias field shape mismatch")
            if not (self.bias > 0).all():
                raise ValidationError("bias field must be strictly positive")

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    def liver_mask(self) -> np.ndarray:
        return self.labels == self.liver_id


def _ellipse(size, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    y = yy - cy
    x = xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (x * c + y * s) / rx
    v = (-x * s + y * c) / ry
    return u * u + v * v <= 1.0


def _blob(rng, size, cy, cx, r_lo, r_hi, n_lobes):
    """Union of a few overlapping rotated ellipses around (cy, cx)."""
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_lobes):
        ry = rng.uniform(r_lo, r_hi) * size
        rx = rng.uniform(r_lo, r_hi) * size
        dy = rng.uniform(-0.4, 0.4) * ry
        dx = rng.uniform(-0.4, 0.4) * rx
        theta = rng.uniform(0, np.pi)
        mask |= _ellipse(size, cy + dy, cx + dx, ry, rx, theta)
    return mask


def synth_bias_field(seed: int, size: int, amplitude: float) -> np.ndarray:
    """Smooth low-order harmonic field, spatial mean exactly 1, values within
    [1 - amplitude, 1 + amplitude]."""
    if not 0 <= amplitude < 1:
        raise ValidationError("amplitude must be in [0, 1)")
    if amplitude == 0:
        return np.ones((size, size), dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB1A5]))
    t = np.arange(size, dtype=np.float64) / size
    raw = np.zeros((size, size), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            if ky == kx == 0:
                continue
            cy = np.cos(np.pi * (ky * t + rng.uniform(0, 1)))
            cx = np.cos(np.pi * (kx * t + rng.uniform(0, 1)))
            raw += rng.normal(0, 1.0 / (1 + ky + kx)) * np.outer(cy, cx)
    raw -= raw.mean()
    peak = np.abs(raw).max()
    if peak == 0:
        return np.ones((size, size), dtype=np.float64)
    return 1.0 + amplitude * raw / peak


def generate_phantom(seed: int, size: int, difficulty: str = "easy",
                     bias_amplitude: float = 0.0) -> Phantom:
    """Deterministic phantom: body outline, liver-like blob, 3-6 distractor
    organs, per-phantom jittered tissue values."""
    if size < 32:
        raise ConfigError("size must be at least 32")
    if size % 16:
        raise ConfigError(f"size {size} not divisible by 16 (network constraint)")
    if difficulty not in ("easy", "t2_only"):
        raise ConfigError(f"unknown difficulty {difficulty!r}")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF0A7]))
    labels = np.zeros((size, size), dtype=np.uint8)

    # body: one large tilted ellipse, slightly off-center
    body = _ellipse(
        size,
        cy=size * rng.uniform(0.48, 0.52),
        cx=size * rng.uniform(0.48, 0.52),
        ry=size * rng.uniform(0.30, 0.36),
        rx=size * rng.uniform(0.36, 0.42),
        theta=rng.uniform(-0.2, 0.2),
    )
    labels[body] = BODY_ID

    # liver: 2-3 lobes in the upper-left body quadrant
    liver = _blob(
        rng, size,
        cy=size * rng.uniform(0.36, 0.44),
        cx=size * rng.uniform(0.34, 0.42),
        r_lo=0.10, r_hi=0.15,
        n_lobes=rng.integers(2, 4),
    ) & body
    labels[liver] = LIVER_ID

    liver_pd = rng.uniform(0.96, 1.04)
    liver_t2 = LIVER_T2_MS * rng.uniform(0.94, 1.06)
    tissues = [
        TissueClass("background", 0.02, 5.0),
        TissueClass("body", rng.uniform(0.80, 0.90), BODY_T2_MS * rng.uniform(0.92, 1.08)),
        TissueClass("liver", liver_pd, liver_t2),
    ]

    n_distract = int(rng.integers(3, 7))
    placed = 0
    attempts = 0
    while placed < n_distract and attempts < 200:
        attempts += 1
        blob = _blob(
            rng, size,
            cy=size * rng.uniform(0.30, 0.72),
            cx=size * rng.uniform(0.30, 0.72),
            r_lo=0.05, r_hi=0.11,
            n_lobes=int(rng.integers(1, 3)),
        )
        blob &= labels == BODY_ID  # never overwrite liver or earlier organs
        if blob.sum() < max(20, size * size // 400):
            continue
        if placed == 0 and difficulty == "t2_only":
            # proton density indistinguishable from liver, T2 well separated
            pd = liver_pd * (1.0 + rng.uniform(-0.04, 0.04))
            t2 = liver_t2 * rng.uniform(1.35, 1.60)
            name = "mimic"
        else:
            name, pd0, t20 = DISTRACTOR_PALETTE[placed % len(DISTRACTOR_PALETTE)]
            pd = pd0 * rng.uniform(0.92, 1.08)
            t2 = t20 * rng.uniform(0.92, 1.08)
        tissues.append(TissueClass(name, pd, t2))
        labels[blob] = len(tissues) - 1
        placed += 1
    if difficulty == "t2_only" and placed == 0:
        raise ConfigError("could not place the PD-matched distractor")

    bias = None
    if bias_amplitude > 0:
        bias = synth_bias_field(seed, size, bias_amplitude)
    return Phantom(labels=labels, tissue_table=tissues, liver_id=LIVER_ID, bias=bias)


def pd_t2_images(ph: Phantom):
    """Per-pixel table lookup: (PD image, true unclipped T2 image, liver mask)."""
    pd_tab = np.array([t.pd for t in ph.tissue_table], dtype=np.float64)
    t2_tab = np.array([t.t2_ms for t in ph.tissue_table], dtype=np.float64)
    return pd_tab[ph.labels], t2_tab[ph.labels], ph.liver_mask()
