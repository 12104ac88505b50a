"""
SIMO uplink synthesis: ``Y = h s^T + j w^T + N``.

Rayleigh-fading UE and jammer channels, a QPSK transmit vector with a
fixed pilot prefix, one of four jammer behaviours, and AWGN. Every block
is calibrated so that the realized jammer-to-signal ratio
``||j w^T||_F^2 / ||h s^T||_F^2`` and the per-antenna SNR
``||h||^2 / (B N0)`` hit their targets exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

QPSK_AMPLITUDE = 1.0 / math.sqrt(2.0)


class JammerKind(str, enum.Enum):
    BARRAGE = "barrage"
    SMART_DATA = "smart_data"
    SMART_PILOT = "smart_pilot"
    SPARSE = "sparse"


@dataclass(frozen=True)
class SystemDims:
    B: int = 8
    K: int = 32
    T: int = 4

    def __post_init__(self):
        if self.B < 1 or self.K < 1 or not 1 <= self.T <= self.K:
            raise ValueError(f"invalid dimensions {self}")

    @property
    def D(self) -> int:
        return self.K - self.T

    def to_dict(self) -> dict:
        return {"B": self.B, "K": self.K, "T": self.T}


@dataclass(frozen=True)
class JammerSpec:
    """Jammer type and receive jammer-to-signal ratio in dB (``-inf`` disables it)."""

    kind: JammerKind = JammerKind.BARRAGE
    rho_db: float = 30.0
    sparse_count: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", JammerKind(self.kind))
        if math.isnan(self.rho_db) or self.rho_db == math.inf:
            raise ValueError("rho_db must be finite or -inf")
        if self.sparse_count < 0:
            raise ValueError("sparse_count must be non-negative")

    @property
    def active(self) -> bool:
        return self.rho_db != -math.inf

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "rho_db": self.rho_db, "sparse_count": self.sparse_count}

    @classmethod
    def from_dict(cls, d: dict) -> "JammerSpec":
        return cls(JammerKind(d["kind"]), float(d.get("rho_db", 30.0)), int(d.get("sparse_count", 4)))


@dataclass
class BlockTruth:
    h: np.ndarray
    j: np.ndarray
    s: np.ndarray
    w: np.ndarray
    N0: float


@dataclass
class ReceiveBlock:
    Y: np.ndarray
    truth: BlockTruth
    dims: SystemDims = field(default_factory=SystemDims)
    pilots: np.ndarray | None = None

    @property
    def data_symbols(self) -> np.ndarray:
        return self.truth.s[self.dims.T:]


def default_pilots(T: int) -> np.ndarray:
    """Deterministic unit-modulus pilot sequence: every entry ``(1+1j)/sqrt(2)``."""
    return np.full(T, QPSK_AMPLITUDE * (1 + 1j))


def draw_rayleigh(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` i.i.d. CN(0, 1) entries."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * math.sqrt(0.5)


def qpsk_symbols(bits: np.ndarray) -> np.ndarray:
    """Map bit pairs ``(..., 2)`` to QPSK: bit 0 selects +, bit 1 selects - on each axis."""
    bits = np.asarray(bits)
    return QPSK_AMPLITUDE * ((1 - 2 * bits[..., 0]) + 1j * (1 - 2 * bits[..., 1]))


def draw_symbols(rng: np.random.Generator, dims: SystemDims, pilots: np.ndarray | None = None) -> np.ndarray:
    pilots = default_pilots(dims.T) if pilots is None else np.asarray(pilots, dtype=np.complex128)
    if pilots.shape != (dims.T,):
        raise ValueError(f"expected {dims.T} pilots, got shape {pilots.shape}")
    data = qpsk_symbols(rng.integers(0, 2, size=(dims.D, 2)))
    return np.concatenate([pilots, data])


def draw_jammer_signal(rng: np.random.Generator, spec: JammerSpec, dims: SystemDims) -> np.ndarray:
    """Unscaled jammer transmit vector; the power is fixed later by rho calibration."""
    K, T = dims.K, dims.T
    z = draw_rayleigh(rng, K)
    kind = spec.kind
    if kind is JammerKind.BARRAGE:
        return z
    if kind is JammerKind.SMART_DATA:
        z[:T] = 0
        return z
    if kind is JammerKind.SMART_PILOT:
        z[T:] = 0
        return z
    if spec.sparse_count > K:
        raise ValueError(f"sparse_count {spec.sparse_count} exceeds K={K}")
    mask = np.zeros(K, dtype=bool)
    mask[rng.choice(K, size=spec.sparse_count, replace=False)] = True
    return np.where(mask, z, 0)


def realized_rho(h, s, j, w) -> float:
    return float(np.linalg.norm(np.outer(j, w)) ** 2 / np.linalg.norm(np.outer(h, s)) ** 2)


def calibrate_jammer(h: np.ndarray, s: np.ndarray, j: np.ndarray, w: np.ndarray, rho_db: float) -> np.ndarray:
    """Rescale ``w`` so that ``||j w^T||^2 / ||h s^T||^2`` equals ``10**(rho_db/10)``."""
    if rho_db == -math.inf:
        return np.zeros_like(w)
    signal = np.vdot(h, h).real * np.vdot(s, s).real
    jam = np.vdot(j, j).real * np.vdot(w, w).real
    return w * math.sqrt(10.0 ** (rho_db / 10.0) * signal / jam)


def noise_variance(h: np.ndarray, snr_db: float) -> float:
    """``N0`` such that ``||h||^2 / (B N0)`` equals the requested SNR."""
    if snr_db == math.inf:
        return 0.0
    return float(np.vdot(h, h).real / (h.size * 10.0 ** (snr_db / 10.0)))


def synthesize_block(
    rng: np.random.Generator,
    dims: SystemDims,
    spec: JammerSpec,
    snr_db: float,
    pilots: np.ndarray | None = None,
) -> ReceiveBlock:
    """Draw one coherence block. ``snr_db=inf`` gives a noiseless block."""
    pilots = default_pilots(dims.T) if pilots is None else np.asarray(pilots, dtype=np.complex128)
    h = draw_rayleigh(rng, dims.B)
    j = draw_rayleigh(rng, dims.B)
    s = draw_symbols(rng, dims, pilots)
    if spec.active and spec.kind is JammerKind.SPARSE and spec.sparse_count == 0:
        raise ValueError("an active sparse jammer needs sparse_count >= 1")
    w = draw_jammer_signal(rng, spec, dims)
    while spec.active and np.vdot(w, w).real == 0.0:
        w = draw_jammer_signal(rng, spec, dims)
    w = calibrate_jammer(h, s, j, w, spec.rho_db)
    N0 = noise_variance(h, snr_db)
    N = (rng.standard_normal((dims.B, dims.K)) + 1j * rng.standard_normal((dims.B, dims.K))) * math.sqrt(N0 / 2)
    Y = np.outer(h, s) + np.outer(j, w) + N
    return ReceiveBlock(Y, BlockTruth(h, j, s, w, N0), dims, pilots)
