"""Dense 3D multi-channel volumes and a deterministic random stream.

Layout is fixed once and for all: channel-major, then z, y, x with x
fastest.  A ``Volume`` with dims ``(x, y, z)`` and ``c`` channels wraps a
C-contiguous float32 array of shape ``(c, z, y, x)``.  Every operation in
this package is a pure function over these types; arrays are locked
read-only at construction so accidental in-place mutation fails loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Volume",
    "LabelVolume",
    "Rng",
    "derive_seed",
    "volume_new",
    "gaussian_noise",
    "znorm",
]


Dims = tuple[int, int, int]


def _check_dims(dims: Dims) -> None:
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims!r}")


@dataclass
class Volume:
    """Multi-channel 3D scalar field (float32, shape ``(c, z, y, x)``)."""

    dims: Dims
    channels: int
    data: np.ndarray

    def __post_init__(self) -> None:
        _check_dims(self.dims)
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        x, y, z = self.dims
        expected = (self.channels, z, y, x)
        if self.data.shape != expected:
            raise ValueError(
                f"data shape {self.data.shape} does not match expected {expected}"
            )
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.data.setflags(write=False)

    @classmethod
    def from_array(cls, data: np.ndarray) -> "Volume":
        """Wrap an array of shape ``(c, z, y, x)``."""
        c, z, y, x = data.shape
        return cls(dims=(x, y, z), channels=c, data=data)

    @property
    def n_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def at(self, c: int, x: int, y: int, z: int) -> float:
        """Read one scalar; indices are (channel, x, y, z)."""
        return float(self.data[c, z, y, x])


@dataclass
class LabelVolume:
    """Single-channel 3D field of class indices (uint8, shape ``(z, y, x)``)."""

    dims: Dims
    data: np.ndarray

    def __post_init__(self) -> None:
        _check_dims(self.dims)
        x, y, z = self.dims
        if self.data.shape != (z, y, x):
            raise ValueError(
                f"data shape {self.data.shape} does not match expected {(z, y, x)}"
            )
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        self.data.setflags(write=False)

    @classmethod
    def from_array(cls, data: np.ndarray) -> "LabelVolume":
        z, y, x = data.shape
        return cls(dims=(x, y, z), data=data)

    @property
    def n_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def at(self, x: int, y: int, z: int) -> int:
        return int(self.data[z, y, x])


# splitmix64 constants; the stream element at position k is
# finalize(seed + k * GAMMA), which gives O(1) skip-ahead and a stream that
# depends only on (seed, counter) -- no hidden platform state.
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1


def _finalize(z: np.ndarray) -> np.ndarray:
    # wraparound at 2**64 is the point; silence numpy's overflow warning
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive_seed(base: int, *parts: int) -> int:
    """Fold integer labels into a base seed; order-sensitive and stable."""
    s = np.uint64(base & _U64_MASK)
    with np.errstate(over="ignore"):
        for p in parts:
            s = _finalize((s + np.uint64((int(p) & _U64_MASK)) * _GAMMA) + np.uint64(1))
    return int(s)


@dataclass
class Rng:
    """Counter-based random stream: splitmix64 words, Box-Muller normals.

    Identical ``(seed, counter)`` always produces the identical stream; the
    counter advances by exactly the number of 64-bit words consumed, so a
    stream can be replayed or forked (via :func:`derive_seed`) exactly.
    Instances are single-owner: never share one across threads.
    """

    seed: int
    counter: int = field(default=0)

    def _raw(self, n: int) -> np.ndarray:
        ks = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _finalize(np.uint64(self.seed & _U64_MASK) + ks * _GAMMA)

    def uniforms(self, n: int) -> np.ndarray:
        """n float64 samples in [0, 1) with 53-bit resolution."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def uniform(self, lo: float, hi: float, n: int = 1) -> np.ndarray:
        return lo + (hi - lo) * self.uniforms(n)

    def gaussians(self, n: int) -> np.ndarray:
        """n i.i.d. standard normal float64 samples (Box-Muller pairs)."""
        m = (n + 1) // 2
        u1 = self.uniforms(m)
        u2 = self.uniforms(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], never log(0)
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n) driven by the raw stream."""
        perm = np.arange(n)
        if n > 1:
            raws = self._raw(n - 1)
            for i in range(n - 1, 0, -1):
                j = int(raws[n - 1 - i] % np.uint64(i + 1))
                perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, *parts: int) -> "Rng":
        """Independent child stream keyed by integer labels."""
        return Rng(derive_seed(self.seed, *parts))


def volume_new(dims: Dims, channels: int, fill: float) -> Volume:
    """Constant-filled volume."""
    _check_dims(dims)
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    x, y, z = dims
    data = np.full((channels, z, y, x), fill, dtype=np.float32)
    return Volume(dims=dims, channels=channels, data=data)


def gaussian_noise(v: Volume, sigma2: float, rng: Rng) -> Volume:
    """Add i.i.d. N(0, sigma2) to every element; sigma2 = 0 is the identity."""
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be >= 0, got {sigma2}")
    if sigma2 == 0:
        return Volume(dims=v.dims, channels=v.channels, data=v.data.copy())
    noise = rng.gaussians(v.data.size) * np.sqrt(sigma2)
    out = (v.data.astype(np.float64) + noise.reshape(v.data.shape)).astype(np.float32)
    return Volume(dims=v.dims, channels=v.channels, data=out)


def znorm(v: Volume) -> Volume:
    """Per-channel standardization to mean 0, population std 1.

    A channel with (near-)zero spread passes through shifted to zero mean
    instead of dividing by zero.  Idempotent within float32 rounding.
    """
    out = np.empty_like(v.data)
    for c in range(v.channels):
        x = v.data[c].astype(np.float64)
        mu = x.mean()
        sd = np.sqrt(np.mean((x - mu) ** 2))
        if sd < 1e-12:
            out[c] = (x - mu).astype(np.float32)
        else:
            out[c] = ((x - mu) / sd).astype(np.float32)
    return Volume(dims=v.dims, channels=v.channels, data=out)
