"""Seeded, stream-separated random number generation.

Built on a counter-based splitmix64 sequence: the i-th draw of a stream
is a pure function of (seed, stream id, i), so identical seeds reproduce
identical values across runs and platforms, and consuming extra draws
from one stream never disturbs another.  Gaussians come from the
Box-Muller transform, which is exactly specifiable and portable.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import F32, Tensor, _NP_DTYPE

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Stream ids used by the training and data pipelines.
STREAM_WEIGHTS = 1
STREAM_SHUFFLE = 2
STREAM_PSEUDO = 3
STREAM_GENERATOR = 4
STREAM_SPLIT = 5


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def stable_key(name: str) -> int:
    """Deterministic small integer for keying substreams by name."""
    return zlib.crc32(name.encode("utf-8"))


class DeterministicRng:
    """One logical random stream identified by (seed, stream id).

    Instances hold only a draw counter; derive independent child streams
    with :meth:`substream` instead of sharing one instance across
    consumers.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._base = _mix64_int(_mix64_int(self.seed) ^ _mix64_int((self.stream * _GOLDEN + 1) & _MASK64))
        self._count = 0

    def substream(self, *keys: int) -> "DeterministicRng":
        """Derive an independent stream keyed by one or more integers."""
        base = self._base
        for key in keys:
            base = _mix64_int(base ^ _mix64_int(((int(key) & _MASK64) * _GOLDEN + _GOLDEN) & _MASK64))
        child = DeterministicRng.__new__(DeterministicRng)
        child.seed = self.seed
        child.stream = base
        child._base = base
        child._count = 0
        return child

    def raw64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit draws."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        return _mix64_array(np.uint64(self._base) + idx * np.uint64(_GOLDEN))

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        return (self.raw64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normals(self, n: int) -> np.ndarray:
        """n standard normal doubles via Box-Muller."""
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        # u1 shifted into (0, 1] so the log is finite.
        u1 = u[:pairs] + 2.0 ** -53
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniforms(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


@dataclass(frozen=True)
class PseudoNegConfig:
    """Diagonal Gaussian used as the pseudo-negative class in feature space.

    ``sigma`` is interpreted as a standard deviation: draws are
    mu + sigma * z with z standard normal.
    """

    dim: int
    mu: float = 0.0
    sigma: float = 0.01

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")


def sample_gaussian(
    rng: DeterministicRng,
    n: int,
    d: int,
    cfg: PseudoNegConfig,
    precision: str = F32,
) -> Tensor:
    """Draw an [n, d] matrix of i.i.d. mu + sigma * z pseudo-negatives."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if d != cfg.dim:
        raise ValueError(f"requested dim {d} != configured dim {cfg.dim}")
    z = rng.normals(n * d)
    values = cfg.mu + cfg.sigma * z
    return Tensor(values.reshape(n, d).astype(_NP_DTYPE[precision]))


def init_weights(
    rng: DeterministicRng,
    shape: tuple[int, ...],
    scheme: str = "uniform_fan_in",
    out_axis: int = 0,
    precision: str = F32,
) -> Tensor:
    """Weight tensor uniform on +-1/sqrt(fan_in).

    fan_in is the product of all dimensions except the output-channel
    axis (``out_axis``).
    """
    if scheme != "uniform_fan_in":
        raise ValueError(f"unknown init scheme {scheme!r}")
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"invalid shape {list(shape)}")
    fan_in = 1
    for ax, s in enumerate(shape):
        if ax != (out_axis % len(shape)):
            fan_in *= s
    bound = 1.0 / math.sqrt(fan_in)
    count = int(np.prod(shape))
    values = (rng.uniforms(count) * 2.0 - 1.0) * bound
    return Tensor(values.reshape(shape).astype(_NP_DTYPE[precision]))
