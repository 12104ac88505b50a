"""
Double-precision MAED detector.

The iteration alternates a single power-iteration step that estimates the
jammer's spatial signature with a projected gradient step on the transmit
vector, using the matrix-vector form of every update:

    x = Y conj(s) / ||s||^2          E = Y - x s^T
    v = E^H u                        j = E v
    z = x - j (j^H x) / ||j||^2      s <- prox(s + conj(E^H (tau z)))

All helpers broadcast over leading axes, so a stack of ``(N, B, K)``
receive blocks is processed in one call. The ``*_naive`` functions evaluate
the same quantities through the matrix-matrix formulas and serve as
oracles for the rearranged path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import QPSK_AMPLITUDE
from .prng import XorshiftState, draw_seed_vector


class DegenerateIterateError(ValueError):
    """The iterate has zero energy, so the least-squares channel is undefined."""


@dataclass(frozen=True)
class StepSchedule:
    """Per-iteration step sizes ``tau_t = 2**tau_exponents[t]``."""

    tau_exponents: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tau_exponents", tuple(int(e) for e in self.tau_exponents))
        if not self.tau_exponents:
            raise ValueError("schedule needs at least one iteration")

    @classmethod
    def uniform(cls, exponent: int, t_max: int) -> "StepSchedule":
        return cls((exponent,) * t_max)

    @property
    def t_max(self) -> int:
        return len(self.tau_exponents)

    @property
    def taus(self) -> np.ndarray:
        return np.ldexp(1.0, np.array(self.tau_exponents))

    def truncated(self, t_max: int) -> "StepSchedule":
        """First ``t_max`` steps; longer runs repeat the last exponent."""
        e = self.tau_exponents
        return StepSchedule(e[:t_max] + (e[-1],) * max(0, t_max - len(e)))


@dataclass
class MaedState:
    """Iterate after ``iteration`` updates together with the intermediates that produced it."""

    s_tilde: np.ndarray
    iteration: int
    x: np.ndarray | None = None
    E: np.ndarray | None = None
    j_tilde: np.ndarray | None = None
    z: np.ndarray | None = None


@dataclass
class MulCounter:
    """Counts complex scalar multiplications issued through :meth:`matmul`."""

    count: int = 0
    log: list = field(default_factory=list)

    def matmul(self, A: np.ndarray, B: np.ndarray, label: str = "") -> np.ndarray:
        A = np.asarray(A)
        B = np.asarray(B)
        cols = 1 if B.ndim == 1 else B.shape[-1]
        n = A.shape[-2] * A.shape[-1] * cols
        batch = int(np.prod(A.shape[:-2], dtype=np.int64)) if A.ndim > 2 else 1
        self.count += n * batch
        self.log.append((label, n * batch))
        return A @ B


def _mm(counter: MulCounter | None, A, B, label=""):
    return counter.matmul(A, B, label) if counter is not None else A @ B


def _herm(A: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(A, -1, -2))


def initial_iterate(pilots: np.ndarray, K: int) -> np.ndarray:
    s = np.zeros(K, dtype=np.complex128)
    s[: len(pilots)] = pilots
    return s


def prox(s: np.ndarray, pilots: np.ndarray) -> np.ndarray:
    """Overwrite the pilot prefix and clip data entries to the QPSK convex hull."""
    T = len(pilots)
    out = np.array(s, dtype=np.complex128, copy=True)
    a = QPSK_AMPLITUDE
    data = out[..., T:]
    out[..., T:] = np.clip(data.real, -a, a) + 1j * np.clip(data.imag, -a, a)
    out[..., :T] = pilots
    return out


def residualize(Y: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares channel ``x`` for iterate ``s`` and the residual ``E = Y - x s^T``."""
    ns = np.sum(np.abs(s) ** 2, axis=-1)
    if np.any(ns <= 0):
        raise DegenerateIterateError("iterate has zero norm")
    x = (Y @ np.conj(s)[..., None])[..., 0] / ns[..., None]
    E = Y - x[..., :, None] * s[..., None, :]
    return x, E


def residual_naive(Y: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``E = Y (I - conj(s) s^T / ||s||^2)`` via the explicit K x K projector."""
    K = s.shape[-1]
    ns = np.sum(np.abs(s) ** 2, axis=-1)[..., None, None]
    Pi = np.conj(s)[..., :, None] * s[..., None, :] / ns
    return Y @ (np.eye(K) - Pi)


def power_iteration_step(E: np.ndarray, u: np.ndarray, counter: MulCounter | None = None) -> np.ndarray:
    """``j = E (E^H u)``: two matrix-vector products, ``2KB`` multiplications."""
    v = _mm(counter, _herm(E), u[..., None], "E^H u")
    return _mm(counter, E, v, "E v")[..., 0]


def power_iteration_naive(E: np.ndarray, u: np.ndarray, counter: MulCounter | None = None) -> np.ndarray:
    """``j = (E E^H) u``: one Gram matrix and one product, ``(K+1)B^2`` multiplications."""
    G = _mm(counter, E, _herm(E), "E E^H")
    return _mm(counter, G, u[..., None], "G u")[..., 0]


def null_jammer(x: np.ndarray, j: np.ndarray) -> np.ndarray:
    """``z = x - j (j^H x) / ||j||^2``; a vanishing ``j`` leaves ``x`` unchanged."""
    nj = np.sum(np.abs(j) ** 2, axis=-1)
    jx = np.sum(np.conj(j) * x, axis=-1)
    safe = np.where(nj > 0, nj, 1.0)
    coef = np.where(nj > 0, jx / safe, 0.0)
    return x - j * coef[..., None]


def oblique_gradient_step(x: np.ndarray, E: np.ndarray, j: np.ndarray, tau) -> np.ndarray:
    """Descent update ``E^H (tau z)``; the iterate moves by its complex conjugate."""
    z = null_jammer(x, j)
    tau = np.asarray(tau, dtype=np.float64)
    return (_herm(E) @ (tau[..., None] * z)[..., None])[..., 0]


def jammer_projector(j: np.ndarray) -> np.ndarray:
    B = j.shape[-1]
    nj = np.sum(np.abs(j) ** 2, axis=-1)[..., None, None]
    if np.all(nj == 0):
        return np.broadcast_to(np.eye(B), j.shape[:-1] + (B, B)).copy()
    outer = j[..., :, None] * np.conj(j)[..., None, :]
    return np.eye(B) - np.where(nj > 0, outer / np.where(nj > 0, nj, 1.0), 0.0)


def gradient_naive(Y: np.ndarray, s: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Row gradient ``-(1/||s||^2) s^T Y^H P E`` with the explicit B x B projector."""
    ns = np.sum(np.abs(s) ** 2, axis=-1)[..., None]
    E = residual_naive(Y, s)
    P = jammer_projector(j)
    return -(s[..., None, :] @ _herm(Y) @ P @ E)[..., 0, :] / ns


def evaluate_objective(Y: np.ndarray, j: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Jammer-nulled residual energy ``||P E||_F^2`` with the channel at its LS optimum."""
    _, E = residualize(Y, s)
    PE = jammer_projector(j) @ E
    return np.sum(np.abs(PE) ** 2, axis=(-2, -1))


def slice_qpsk(s: np.ndarray) -> np.ndarray:
    """Per-axis sign decision onto the QPSK points (zero maps to +)."""
    a = QPSK_AMPLITUDE
    return np.where(s.real >= 0, a, -a) + 1j * np.where(s.imag >= 0, a, -a)


def symbol_bits(s: np.ndarray) -> np.ndarray:
    """Bit pairs ``(..., 2)`` of QPSK symbols; a negative axis is a 1 bit."""
    return np.stack([s.real < 0, s.imag < 0], axis=-1).astype(np.uint8)


def maed_iterations(
    Y: np.ndarray,
    pilots: np.ndarray,
    schedule: StepSchedule,
    seed_vectors: np.ndarray,
    keep_trace: bool = False,
):
    """Run the iteration on one block ``(B, K)`` or a stack ``(N, B, K)``.

    ``seed_vectors`` holds the power-iteration start vectors with shape
    ``(t_max, B)`` or ``(N, t_max, B)``. Returns the final iterate and,
    if requested, the list of :class:`MaedState`.
    """
    Y = np.asarray(Y, dtype=np.complex128)
    K = Y.shape[-1]
    s = np.broadcast_to(initial_iterate(pilots, K), Y.shape[:-2] + (K,)).copy()
    trace = [MaedState(s.copy(), 0)] if keep_trace else None
    for t, tau in enumerate(schedule.taus):
        u = seed_vectors[..., t, :]
        x, E = residualize(Y, s)
        j = power_iteration_step(E, u)
        z = null_jammer(x, j)
        update = (_herm(E) @ (tau * z)[..., None])[..., 0]
        s = prox(s + np.conj(update), pilots)
        if keep_trace:
            trace.append(MaedState(s.copy(), t + 1, x, E, j, z))
    return s, trace


def draw_seed_vectors(state: XorshiftState, B: int, t_max: int) -> tuple[np.ndarray, XorshiftState]:
    """Free-running draw of the ``t_max`` start vectors used by one block."""
    U = np.empty((t_max, B), dtype=np.complex128)
    for t in range(t_max):
        U[t], state = draw_seed_vector(state, B)
    return U, state


def run_maed(
    Y: np.ndarray,
    pilots: np.ndarray,
    schedule: StepSchedule,
    t_max: int | None = None,
    prng: XorshiftState | int = 1,
):
    """Detect one block; returns ``(hard data decisions, trace)``.

    The trace holds ``t_max + 1`` states, the first being the pilot-only
    initialization.
    """
    if t_max is not None:
        if t_max < 1:
            raise ValueError("t_max must be at least 1")
        schedule = schedule.truncated(t_max)
    if not isinstance(prng, XorshiftState):
        prng = XorshiftState.from_seed(prng)
    U, _ = draw_seed_vectors(prng, Y.shape[0], schedule.t_max)
    s, trace = maed_iterations(Y, pilots, schedule, U, keep_trace=True)
    return slice_qpsk(s[len(pilots):]), trace
