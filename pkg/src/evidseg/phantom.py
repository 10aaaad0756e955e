"""Seeded synthetic multi-modal brain-tumor phantoms.

Each sample is a spherical "brain" inside a dark background, optionally
carrying a tumor built from three nested axis-aligned ellipsoids: necrotic
core (class 1) inside an enhancing rim (class 3) inside an edema shell
(class 2); class 0 is everything else.  Internal class indices {0,1,2,3}
correspond to the conventional external labels {0,1,2,4}; the mapping
travels in the sample metadata.

Four intensity channels play the roles of T1/T1c/T2/FLAIR: compartments
are separable only by combining channels (e.g. the rim is bright in
channel 1, edema in channel 3).  A smooth random bias field and Gaussian
noise are added before per-channel z-normalization, so thresholding a
single channel is not enough.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import LabelVolume, Rng, Volume, znorm

__all__ = [
    "PhantomConfig",
    "PhantomSample",
    "LABEL_MAP",
    "generate",
    "make_dataset",
    "merge_whole_tumor",
]

# internal class index -> conventional dataset label
LABEL_MAP = {0: 0, 1: 1, 2: 2, 3: 4}

N_MODALITIES = 4

# Mean intensity per (modality, tissue); tissue columns are
# outside-brain, healthy brain, necrotic, edema, enhancing rim.
# Channel roles: 0 T1-like, 1 T1c-like, 2 T2-like, 3 FLAIR-like.
_DEFAULT_INTENSITY = (
    (0.05, 0.60, 0.30, 0.45, 0.55),
    (0.05, 0.55, 0.25, 0.50, 0.95),
    (0.10, 0.40, 0.75, 0.80, 0.55),
    (0.10, 0.45, 0.60, 0.90, 0.65),
)


@dataclass
class PhantomConfig:
    """Geometry, intensity, and corruption parameters for one phantom."""

    dims: tuple[int, int, int] = (32, 32, 32)
    # base seed for dataset generation (sample i uses seed + i)
    seed: int = 1234
    tumor_prob: float = 1.0
    # per-axis edema radius is drawn uniformly from this range (voxels);
    # defaults keep whole-tumor occupancy in roughly 1-20% of a 32^3 volume
    edema_radius_range: tuple[float, float] = (5.0, 8.0)
    # inner compartments are scaled copies of the edema ellipsoid
    enhancing_factor_range: tuple[float, float] = (0.55, 0.75)
    necrotic_factor_range: tuple[float, float] = (0.25, 0.45)
    brain_radius_frac: float = 0.45
    intensity: tuple = _DEFAULT_INTENSITY
    noise_std: float = 0.05
    bias_amplitude: float = 0.1

    def __post_init__(self) -> None:
        if any(int(d) < 16 for d in self.dims):
            raise ValueError(f"dims must be >= 16 on every axis, got {self.dims}")
        if not 0.0 <= self.tumor_prob <= 1.0:
            raise ValueError("tumor_prob must be in [0, 1]")
        for lo, hi in (
            self.edema_radius_range,
            self.enhancing_factor_range,
            self.necrotic_factor_range,
        ):
            if not 0 < lo <= hi:
                raise ValueError("radius/factor ranges must satisfy 0 < lo <= hi")
        if self.noise_std < 0 or self.bias_amplitude < 0:
            raise ValueError("noise_std and bias_amplitude must be >= 0")


@dataclass
class PhantomSample:
    image: Volume
    labels: LabelVolume
    meta: dict = field(default_factory=dict)


def _coord_grids(dims: tuple[int, int, int]) -> tuple[np.ndarray, ...]:
    x, y, z = dims
    zz, yy, xx = np.meshgrid(
        np.arange(z, dtype=np.float64),
        np.arange(y, dtype=np.float64),
        np.arange(x, dtype=np.float64),
        indexing="ij",
    )
    return xx, yy, zz


def _ellipsoid_mask(grids, center, radii) -> np.ndarray:
    xx, yy, zz = grids
    q = (
        ((xx - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((zz - center[2]) / radii[2]) ** 2
    )
    return q <= 1.0


def _bias_field(grids, amplitude: float, rng: Rng) -> np.ndarray:
    """Sum of 3 separable low-frequency cosine products, peak ~amplitude."""
    xx, yy, zz = grids
    nx, ny, nz = xx.max() + 1.0, yy.max() + 1.0, zz.max() + 1.0
    out = np.zeros_like(xx)
    for _ in range(3):
        fx, fy, fz = rng.uniform(0.5, 1.5, 3)
        px, py, pz = rng.uniforms(3)
        out += (
            np.cos(2.0 * np.pi * (fx * xx / nx + px))
            * np.cos(2.0 * np.pi * (fy * yy / ny + py))
            * np.cos(2.0 * np.pi * (fz * zz / nz + pz))
        )
    return amplitude * out / 3.0


def generate(cfg: PhantomConfig, rng: Rng) -> PhantomSample:
    """One deterministic sample from (cfg, rng seed)."""
    dims = cfg.dims
    x, y, z = dims
    grids = _coord_grids(dims)
    brain_center = ((x - 1) / 2.0, (y - 1) / 2.0, (z - 1) / 2.0)
    brain_r = cfg.brain_radius_frac * min(dims)
    brain = _ellipsoid_mask(grids, brain_center, (brain_r, brain_r, brain_r))

    labels = np.zeros((z, y, x), dtype=np.uint8)
    meta: dict = {
        "seed": rng.seed,
        "label_map": dict(LABEL_MAP),
        "has_tumor": False,
    }

    if float(rng.uniforms(1)[0]) < cfg.tumor_prob:
        lo, hi = cfg.edema_radius_range
        radii = rng.uniform(lo, hi, 3)
        radii = np.minimum(radii, brain_r - 1.0)  # keep the tumor inside
        slack = max(brain_r - float(radii.max()), 0.0)
        center = np.array(brain_center)
        for _ in range(100):  # rejection sample an offset inside the slack ball
            off = rng.uniform(-slack, slack, 3)
            if float(np.sum(off * off)) <= slack * slack:
                center = np.array(brain_center) + off
                break
        f_enh = float(rng.uniform(*cfg.enhancing_factor_range)[0])
        f_nec = float(rng.uniform(*cfg.necrotic_factor_range)[0])

        edema = _ellipsoid_mask(grids, center, radii)
        enhancing = _ellipsoid_mask(grids, center, radii * f_enh)
        necrotic = _ellipsoid_mask(grids, center, radii * f_nec)
        labels[edema] = 2
        labels[enhancing] = 3
        labels[necrotic] = 1
        meta.update(
            has_tumor=True,
            center=tuple(float(c) for c in center),
            edema_radii=tuple(float(r) for r in radii),
            enhancing_factor=f_enh,
            necrotic_factor=f_nec,
        )

    # tissue index per voxel: 0 outside, 1 brain, 2 necrotic, 3 edema, 4 rim
    tissue = np.zeros((z, y, x), dtype=np.int64)
    tissue[brain] = 1
    tissue[labels == 1] = 2
    tissue[labels == 2] = 3
    tissue[labels == 3] = 4

    table = np.asarray(cfg.intensity, dtype=np.float64)
    if table.shape != (N_MODALITIES, 5):
        raise ValueError(f"intensity table must be {N_MODALITIES}x5, got {table.shape}")
    img = np.empty((N_MODALITIES, z, y, x), dtype=np.float64)
    n = labels.size
    for m in range(N_MODALITIES):
        img[m] = table[m][tissue]
        img[m] += _bias_field(grids, cfg.bias_amplitude, rng)
        img[m] += cfg.noise_std * rng.gaussians(n).reshape(z, y, x)

    vol = znorm(Volume(dims=dims, channels=N_MODALITIES, data=img.astype(np.float32)))
    return PhantomSample(image=vol, labels=LabelVolume(dims=dims, data=labels), meta=meta)


def make_dataset(n: int, cfg: PhantomConfig, seed: int) -> list[PhantomSample]:
    """n samples from consecutive seeds seed, seed+1, ..."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [generate(cfg, Rng(seed + i)) for i in range(n)]


def merge_whole_tumor(labels: LabelVolume) -> LabelVolume:
    """Binary mask of all tumor compartments: 1 where class is 1, 2, or 3."""
    if labels.data.max(initial=0) > 3:
        raise ValueError("labels must lie in {0, 1, 2, 3}")
    return LabelVolume(dims=labels.dims, data=(labels.data != 0).astype(np.uint8))
