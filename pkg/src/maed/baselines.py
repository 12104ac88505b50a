"""Non-mitigating receiver: pilot-based LS channel estimate + SIMO LMMSE detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .reference import slice_qpsk


@dataclass
class ChannelEstimate:
    h_hat: np.ndarray
    source: str = "LS"


@dataclass
class Detection:
    symbols: np.ndarray
    degenerate: bool | np.ndarray = False


def ls_channel_estimate(Y_T: np.ndarray, s_T: np.ndarray) -> ChannelEstimate:
    """``h_hat = Y_T conj(s_T) / ||s_T||^2``; broadcasts over leading block axes."""
    s_T = np.asarray(s_T)
    energy = np.sum(np.abs(s_T) ** 2, axis=-1)
    if np.any(energy <= 0):
        raise ValueError("pilot sequence has zero energy")
    h = (Y_T @ np.conj(s_T)[..., None])[..., 0] / np.asarray(energy)[..., None]
    return ChannelEstimate(h)


def lmmse_detect(Y_D: np.ndarray, est: ChannelEstimate, N0, rng: np.random.Generator | None = None) -> Detection:
    """Per-slot ``slice(h^H y / (||h||^2 + N0))``.

    A zero channel estimate carries no information; those blocks get
    uniformly random decisions and are flagged ``degenerate``.
    """
    h = est.h_hat
    gain = np.sum(np.abs(h) ** 2, axis=-1)
    filt = np.conj(h) / (gain + np.asarray(N0, dtype=np.float64))[..., None]
    y = np.einsum("...b,...bk->...k", filt, Y_D)
    symbols = slice_qpsk(y)
    degenerate = gain == 0
    if np.any(degenerate):
        rng = rng or np.random.default_rng(0)
        rand = slice_qpsk(rng.standard_normal(symbols.shape) + 1j * rng.standard_normal(symbols.shape))
        symbols = np.where(np.asarray(degenerate)[..., None], rand, symbols)
    return Detection(symbols, degenerate if np.ndim(degenerate) else bool(degenerate))


def detect_ls_lmmse(Y: np.ndarray, pilots: np.ndarray, N0) -> np.ndarray:
    """Hard data decisions of the LS + LMMSE receiver for one block or a stack."""
    T = len(pilots)
    est = ls_channel_estimate(Y[..., :T], pilots)
    return lmmse_detect(Y[..., T:], est, N0).symbols
