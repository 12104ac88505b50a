"""
Bit-accurate fixed-point model of the MAED datapath.

Every stored signal has its own :class:`~maed.numerics.QFormat`
(collected in an :class:`FxProfile`). Products are accumulated exactly and
narrowed once per output, reciprocals come from normalized-mantissa LUTs,
the jammer estimate is pseudonormalized by a power of two before its
energy is formed, and step sizes are arithmetic shifts.

Complex arrays are carried as ``(re, im)`` pairs of integer mantissa
arrays. The model is vectorized over a leading block axis; when the
profile's widest intermediate does not fit ``int64`` the arrays switch to
Python integers (``dtype=object``) and stay exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .channel import QPSK_AMPLITUDE
from .numerics import QFormat, Rounding, quantize, requantize, saturate, shift_round, to_float
from .prng import XorshiftState, seed_vector_signs
from .reference import StepSchedule

SIGNALS = ("Y", "s_tilde", "x", "E", "v", "j_tilde", "coef", "z", "update")


class DegenerateNormError(ValueError):
    """A reciprocal was requested for a zero or out-of-range norm."""


# ---------------------------------------------------------------------------
# leading-one detection on arrays
# ---------------------------------------------------------------------------


def lod_array(x):
    """Elementwise MSB index of non-negative mantissas; -1 marks zero."""
    x = np.asarray(x)
    if x.dtype == object:
        return np.vectorize(lambda v: int(v).bit_length() - 1, otypes=[np.int64])(x)
    x = x.astype(np.int64)
    _, e = np.frexp(x.astype(np.float64))
    L = e.astype(np.int64) - 1
    L = np.where(x > 0, L, -1)
    # frexp rounds values above 2**53; fix the off-by-one
    Lc = np.maximum(L, 0)
    L = np.where((x > 0) & ((x >> Lc) == 0), L - 1, L)
    Lc = np.maximum(L, 0)
    hi = np.minimum(Lc + 1, 62)
    L = np.where((x > 0) & (Lc < 62) & ((x >> hi) != 0), L + 1, L)
    return L


# ---------------------------------------------------------------------------
# reciprocal LUT
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LutSpec:
    """Reciprocal table over ``m in [1, 2)``.

    ``addr_bits`` leading fraction bits of ``m`` select an entry; entries
    hold ``1/m`` at the bin's left edge, rounded to ``value_frac_bits``.
    The stored word is ``value_frac_bits + 1`` bits wide (unsigned, 1.0
    included).
    """

    addr_bits: int = 8
    value_frac_bits: int = 10

    def __post_init__(self):
        if self.addr_bits < 0:
            raise ValueError("addr_bits must be non-negative")
        if not 8 <= self.value_width <= 64:
            raise ValueError(f"LUT value width {self.value_width} outside [8, 64]")

    @property
    def value_width(self) -> int:
        return self.value_frac_bits + 1

    @property
    def size(self) -> int:
        return 1 << self.addr_bits

    def entry(self, addr):
        """Stored reciprocal mantissa(s) for address(es) ``addr``."""
        n, w = self.addr_bits, self.value_frac_bits
        num = 1 << (w + n + 1)
        if isinstance(addr, np.ndarray):
            if w + n + 3 > 62:
                addr = addr.astype(object)
            den = (addr + (1 << n)) * 2
            return (num + den // 2) // den
        den = 2 * ((1 << n) + int(addr))
        return (num + den // 2) // den

    def table(self) -> list[int]:
        return [self.entry(a) for a in range(self.size)]

    def to_dict(self) -> dict:
        return {"addr_bits": self.addr_bits, "value_frac_bits": self.value_frac_bits}

    @classmethod
    def from_dict(cls, d) -> "LutSpec":
        return cls(int(d["addr_bits"]), int(d["value_frac_bits"]))


def lut_reciprocal(raw, frac_bits: int, lut: LutSpec):
    """Normalize positive ``raw * 2**-frac_bits`` to ``m * 2**e`` and look up ``1/m``.

    Returns ``(mantissa, e)``; the reciprocal is ``mantissa * 2**-(value_frac_bits + e)``.
    """
    scalar = not isinstance(raw, np.ndarray)
    r = np.asarray(raw if not scalar else [int(raw)], dtype=object if scalar else None)
    L = lod_array(r)
    if np.any(L < 0):
        raise DegenerateNormError("reciprocal of zero")
    n = lut.addr_bits
    Lc = L if r.dtype != object else L.astype(object)
    down = np.maximum(Lc - n, 0)
    up = np.maximum(n - Lc, 0)
    addr = ((r >> down) << up) - (np.ones_like(r) << n)
    mant = lut.entry(addr)
    e = L - frac_bits
    if scalar:
        return int(mant[0]), int(e[0])
    return mant, e


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------


def _default_formats() -> dict[str, QFormat]:
    return {
        "Y": QFormat(10, 12),
        "s_tilde": QFormat(1, 12),
        "x": QFormat(10, 12),
        "E": QFormat(10, 12),
        "v": QFormat(15, 8),
        "j_tilde": QFormat(1, 12),
        "coef": QFormat(12, 12),
        "z": QFormat(12, 12),
        "update": QFormat(4, 12),
    }


@dataclass(frozen=True)
class FxProfile:
    """Formats of every stored signal plus the two reciprocal LUT geometries."""

    formats: dict = field(default_factory=_default_formats)
    lut_s: LutSpec = LutSpec(8, 10)
    lut_j: LutSpec = LutSpec(12, 14)
    rounding: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = set(SIGNALS) - set(self.formats)
        if missing:
            raise ValueError(f"profile lacks formats for {sorted(missing)}")
        for sig, mode in self.rounding.items():
            if sig not in SIGNALS:
                raise ValueError(f"unknown signal {sig!r}")
            Rounding(mode)

    def __hash__(self):
        return hash((tuple(sorted(self.formats.items())), self.lut_s, self.lut_j,
                     tuple(sorted((k, Rounding(v).value) for k, v in self.rounding.items()))))

    def __getitem__(self, sig: str) -> QFormat:
        return self.formats[sig]

    def frac(self, sig: str) -> int:
        return self.formats[sig].fraction_bits

    def mode(self, sig: str) -> Rounding:
        return Rounding(self.rounding.get(sig, Rounding.TRUNCATE))

    @classmethod
    def default(cls) -> "FxProfile":
        return cls()

    @classmethod
    def uniform(cls, frac_bits: int) -> "FxProfile":
        """Default integer bits with every fraction width (and both LUTs) set to ``frac_bits``."""
        base = _default_formats()
        fmts = {k: QFormat(f.integer_bits, frac_bits) for k, f in base.items()}
        lut = LutSpec(frac_bits, max(frac_bits, 7))
        return cls(fmts, lut, lut)

    def with_rounding(self, mode: Rounding | str) -> "FxProfile":
        return replace(self, rounding={k: Rounding(mode) for k in SIGNALS})

    def dominates(self, other: "FxProfile") -> bool:
        """True if every width of ``self`` is at least the matching width of ``other``."""
        for k in SIGNALS:
            a, b = self.formats[k], other.formats[k]
            if a.integer_bits < b.integer_bits or a.fraction_bits < b.fraction_bits:
                return False
        return (self.lut_s.addr_bits >= other.lut_s.addr_bits
                and self.lut_s.value_frac_bits >= other.lut_s.value_frac_bits
                and self.lut_j.addr_bits >= other.lut_j.addr_bits
                and self.lut_j.value_frac_bits >= other.lut_j.value_frac_bits)

    def max_intermediate_bits(self, B: int, K: int) -> int:
        """Conservative bound on the widest exact intermediate of one iteration."""
        w = {k: f.width for k, f in self.formats.items()}
        f = {k: f.fraction_bits for k, f in self.formats.items()}
        lb, lk = math.ceil(math.log2(max(B, 2))), math.ceil(math.log2(max(K, 2)))
        align = max(0, f["x"] + f["s_tilde"] - f["Y"])
        cands = [
            2 * w["s_tilde"] + 1 + lk,
            w["Y"] + w["s_tilde"] + 1 + lk + self.lut_s.value_width + 1,
            w["x"] + w["s_tilde"] + 2,
            w["Y"] + align + 1,
            w["E"] + 3 + lb,
            w["E"] + w["v"] + 1 + lk,
            2 * w["j_tilde"] + 1 + lb,
            w["j_tilde"] + w["x"] + 1 + lb + self.lut_j.value_width + 1,
            w["j_tilde"] + w["coef"] + 2 + abs(f["j_tilde"] + f["coef"] - f["x"]),
            w["E"] + w["z"] + 1 + lb,
            w["update"] + w["s_tilde"] + abs(f["update"] - f["s_tilde"]) + 1,
            self.lut_s.value_frac_bits + self.lut_s.addr_bits + 3,
            self.lut_j.value_frac_bits + self.lut_j.addr_bits + 3,
        ]
        return max(cands)

    def dtype(self, B: int = 8, K: int = 32):
        return np.int64 if self.max_intermediate_bits(B, K) <= 62 else object

    def to_dict(self) -> dict:
        return {
            "formats": {k: v.to_dict() for k, v in self.formats.items()},
            "lut_s": self.lut_s.to_dict(),
            "lut_j": self.lut_j.to_dict(),
            "rounding": {k: Rounding(v).value for k, v in self.rounding.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FxProfile":
        fmts = _default_formats()
        fmts.update({k: QFormat.from_dict(v) for k, v in d.get("formats", {}).items()})
        return cls(
            fmts,
            LutSpec.from_dict(d["lut_s"]) if "lut_s" in d else cls.lut_s,
            LutSpec.from_dict(d["lut_j"]) if "lut_j" in d else cls.lut_j,
            {k: Rounding(v) for k, v in d.get("rounding", {}).items()},
        )


# ---------------------------------------------------------------------------
# datapath pieces
# ---------------------------------------------------------------------------


def constellation_bound(fmt: QFormat) -> int:
    """Mantissa of the prox clipping level ``1/sqrt(2)`` (round to nearest)."""
    return int(quantize(QPSK_AMPLITUDE, fmt, Rounding.NEAREST_EVEN))


def quantize_pilots(pilots: np.ndarray, fmt: QFormat) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pilots, dtype=np.complex128)
    return (quantize(p.real, fmt, Rounding.NEAREST_EVEN), quantize(p.imag, fmt, Rounding.NEAREST_EVEN))


def s_norm_bounds(pilots_q: tuple[np.ndarray, np.ndarray], fmt: QFormat, K: int) -> tuple[Fraction, Fraction]:
    """Exact range of ``||s||^2`` under prox: pilot energy up to full-corner data."""
    pr, pi = pilots_q
    scale = 1 << (2 * fmt.fraction_bits)
    lo = Fraction(int(np.sum(pr.astype(object) ** 2 + pi.astype(object) ** 2)), scale)
    c = constellation_bound(fmt)
    return lo, lo + Fraction((K - len(pr)) * 2 * c * c, scale)


def recip_s_norm(ns_raw, frac_bits: int, lut: LutSpec, bounds=(4, 32)):
    """LUT reciprocal of ``||s||^2``; returns ``(mantissa, e)`` with ``1/ns ~ mantissa 2**-(w+e)``.

    ``bounds`` is the admissible interval of ``||s||^2``; inputs outside it
    mean the pilot/constellation invariant was broken.
    """
    lo = Fraction(bounds[0]) * (1 << frac_bits)
    hi = Fraction(bounds[1]) * (1 << frac_bits)
    arr = np.asarray(ns_raw, dtype=object)
    if np.any(arr < lo) or np.any(arr > hi):
        raise DegenerateNormError(f"||s||^2 outside [{float(bounds[0])}, {float(bounds[1])}]")
    return lut_reciprocal(ns_raw, frac_bits, lut)


def recip_j_norm(nj_raw, frac_bits: int, lut: LutSpec):
    """Mantissa-normalized LUT reciprocal of ``||j||^2``.

    Returns ``(mantissa, e)`` where ``1/nj ~ mantissa * 2**-value_frac_bits * 2**-e``
    and ``mantissa * 2**-value_frac_bits`` lies in ``(0.5, 1]``.
    """
    if np.any(np.asarray(nj_raw, dtype=object) <= 0):
        raise DegenerateNormError("||j||^2 must be positive")
    return lut_reciprocal(nj_raw, frac_bits, lut)


@dataclass
class PseudonormResult:
    re: np.ndarray
    im: np.ndarray
    fmt: QFormat
    shift_applied: np.ndarray
    degenerate: np.ndarray


def pseudonormalize(re, im, frac_bits: int, out_fmt: QFormat) -> PseudonormResult:
    """Scale each vector by ``2**-floor(log2 max|part|)`` so its largest part lands in ``[1, 2)``.

    ``re``/``im`` have shape ``(..., B)`` with mantissas at ``frac_bits``.
    The shifter truncates magnitudes (sign-magnitude), which keeps the
    maximum strictly below 2. Vectors that are identically zero are
    flagged ``degenerate`` and returned as zeros with shift 0.
    """
    re = np.asarray(re)
    im = np.asarray(im)
    mag = np.maximum(np.max(np.abs(re), axis=-1), np.max(np.abs(im), axis=-1))
    L = lod_array(mag)
    degenerate = L < 0
    fo = out_fmt.fraction_bits
    rshift = np.where(degenerate, 0, L - fo)[..., None]
    if re.dtype == object:
        rshift = rshift.astype(object)

    def scale(a):
        down = np.maximum(rshift, 0)
        up = np.maximum(-rshift, 0)
        return np.sign(a) * ((np.abs(a) >> down) << up)

    shift = np.where(degenerate, 0, L - frac_bits)
    return PseudonormResult(
        saturate(scale(re), out_fmt), saturate(scale(im), out_fmt), out_fmt, shift, degenerate
    )


# ---------------------------------------------------------------------------
# complex integer linear algebra on (re, im) pairs
# ---------------------------------------------------------------------------


def _mv_conj(Ar, Ai, xr, xi):
    """``A conj(x)``; A is (..., B, K), x is (..., K)."""
    return (np.einsum("...bk,...k->...b", Ar, xr) + np.einsum("...bk,...k->...b", Ai, xi),
            np.einsum("...bk,...k->...b", Ai, xr) - np.einsum("...bk,...k->...b", Ar, xi))


def _mv(Ar, Ai, xr, xi):
    """``A x``."""
    return (np.einsum("...bk,...k->...b", Ar, xr) - np.einsum("...bk,...k->...b", Ai, xi),
            np.einsum("...bk,...k->...b", Ar, xi) + np.einsum("...bk,...k->...b", Ai, xr))


def _mhv(Ar, Ai, zr, zi):
    """``A^H z``; z is (..., B), result (..., K)."""
    return (np.einsum("...bk,...b->...k", Ar, zr) + np.einsum("...bk,...b->...k", Ai, zi),
            np.einsum("...bk,...b->...k", Ar, zi) - np.einsum("...bk,...b->...k", Ai, zr))


def _inner(ar, ai, br, bi):
    """``a^H b`` over the last axis."""
    return (np.sum(ar * br + ai * bi, axis=-1), np.sum(ar * bi - ai * br, axis=-1))


def _lshift(a, k: int):
    return a << k if k >= 0 else a >> (-k)


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------


@dataclass
class FxState:
    """Mantissas after one fixed-point iteration (leading axis = block)."""

    iteration: int
    s_re: np.ndarray
    s_im: np.ndarray
    x_re: np.ndarray | None = None
    x_im: np.ndarray | None = None
    E_re: np.ndarray | None = None
    E_im: np.ndarray | None = None
    j_re: np.ndarray | None = None
    j_im: np.ndarray | None = None
    j_shift: np.ndarray | None = None
    z_re: np.ndarray | None = None
    z_im: np.ndarray | None = None

    def as_complex(self, profile: FxProfile) -> dict:
        """Float view of every stored signal; ``j_tilde`` is rescaled by ``2**shift``."""
        def c(re, im, sig):
            if re is None:
                return None
            f = profile.frac(sig)
            return to_float(np.asarray(re), f) + 1j * to_float(np.asarray(im), f)

        out = {
            "s_tilde": c(self.s_re, self.s_im, "s_tilde"),
            "x": c(self.x_re, self.x_im, "x"),
            "E": c(self.E_re, self.E_im, "E"),
            "z": c(self.z_re, self.z_im, "z"),
            "j_tilde": c(self.j_re, self.j_im, "j_tilde"),
        }
        if out["j_tilde"] is not None:
            out["j_tilde"] = out["j_tilde"] * np.ldexp(1.0, np.asarray(self.j_shift, dtype=np.int64))[..., None]
        return out

    def signals(self) -> dict:
        return {k: v for k, v in vars(self).items() if isinstance(v, np.ndarray)}

    def block(self, n: int) -> "FxState":
        """State of block ``n`` of a batched run."""
        kw = {k: (v[n] if isinstance(v, np.ndarray) else v) for k, v in vars(self).items()}
        return FxState(**kw)


class FxDetector:
    """Fixed-point MAED for a fixed profile, dimensions, and pilot sequence."""

    def __init__(self, profile: FxProfile, pilots: np.ndarray, K: int, B: int = 8):
        self.profile = profile
        self.B, self.K = B, K
        self.T = len(pilots)
        self.dtype = profile.dtype(B, K)
        fs = profile["s_tilde"]
        pr, pi = quantize_pilots(pilots, fs)
        self.pilot_re = pr.astype(self.dtype)
        self.pilot_im = pi.astype(self.dtype)
        self.bound = constellation_bound(fs)
        self.ns_bounds = s_norm_bounds((pr, pi), fs, K)

    # -- input ----------------------------------------------------------------

    def quantize_input(self, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        fmt = self.profile["Y"]
        mode = self.profile.mode("Y")
        return quantize(Y.real, fmt, mode, self.dtype), quantize(Y.imag, fmt, mode, self.dtype)

    def initial_state(self, n_blocks: tuple = ()) -> FxState:
        shape = n_blocks + (self.K,)
        s_re = np.zeros(shape, dtype=self.dtype)
        s_im = np.zeros(shape, dtype=self.dtype)
        s_re[..., : self.T] = self.pilot_re
        s_im[..., : self.T] = self.pilot_im
        return FxState(0, s_re, s_im)

    # -- datapath stages ------------------------------------------------------

    def s_norm(self, s_re, s_im):
        return np.sum(s_re * s_re + s_im * s_im, axis=-1)

    def line_4a(self, Y_re, Y_im, s_re, s_im):
        """``x = Y conj(s) / ||s||^2`` with the LUT reciprocal."""
        p = self.profile
        ns = self.s_norm(s_re, s_im)
        mant, e = recip_s_norm(ns, 2 * p.frac("s_tilde"), p.lut_s, self.ns_bounds)
        acc_re, acc_im = _mv_conj(Y_re, Y_im, s_re, s_im)
        return self.scale_by_recip_s(acc_re, acc_im, mant, e)

    def scale_by_recip_s(self, acc_re, acc_im, mant, e):
        p = self.profile
        src = p.frac("Y") + p.frac("s_tilde") + p.lut_s.value_frac_bits
        k = src + e - p.frac("x")
        m = np.asarray(mant)[..., None]
        return (self.narrow(acc_re * m, k, "x"), self.narrow(acc_im * m, k, "x"))

    def narrow(self, raw, k, sig):
        """Shift right by ``k`` (int or per-block array), round, and saturate to ``sig``."""
        p = self.profile
        fmt, mode = p[sig], p.mode(sig)
        if np.ndim(k) == 0:
            return saturate(shift_round(raw, int(k), mode), fmt)
        k = np.asarray(k)
        k = k.reshape(k.shape + (1,) * (np.ndim(raw) - k.ndim))
        if raw.dtype == object:
            k = k.astype(object)
        if np.all(k >= 0):
            return saturate(_shift_right_array(raw, k, mode), fmt)
        kk = np.maximum(k, 0)
        return saturate(_shift_right_array(raw << np.maximum(-k, 0), kk, mode), fmt)

    def line_4b(self, Y_re, Y_im, x_re, x_im, s_re, s_im):
        """``E = Y - x s^T``, exact then narrowed to the E format."""
        p = self.profile
        fp = p.frac("x") + p.frac("s_tilde")
        pr = x_re[..., :, None] * s_re[..., None, :] - x_im[..., :, None] * s_im[..., None, :]
        pi = x_re[..., :, None] * s_im[..., None, :] + x_im[..., :, None] * s_re[..., None, :]
        return self.residual_from_products(Y_re, Y_im, pr, pi, fp)

    def residual_from_products(self, Y_re, Y_im, pr, pi, fp):
        p = self.profile
        fy = p.frac("Y")
        f = max(fy, fp)
        er = _lshift(Y_re, f - fy) - _lshift(pr, f - fp)
        ei = _lshift(Y_im, f - fy) - _lshift(pi, f - fp)
        return self.narrow(er, f - p.frac("E"), "E"), self.narrow(ei, f - p.frac("E"), "E")

    def line_6a(self, E_re, E_im, u_re, u_im):
        """``v = E^H u``."""
        vr, vi = _mhv(E_re, E_im, u_re, u_im)
        k = self.profile.frac("E") - self.profile.frac("v")
        return self.narrow(vr, k, "v"), self.narrow(vi, k, "v")

    def line_6b(self, E_re, E_im, v_re, v_im):
        """Exact accumulator ``E v`` (before pseudonormalization)."""
        return _mv(E_re, E_im, v_re, v_im)

    @property
    def jacc_frac(self) -> int:
        return self.profile.frac("E") + self.profile.frac("v")

    def pseudonorm(self, jr, ji):
        return pseudonormalize(jr, ji, self.jacc_frac, self.profile["j_tilde"])

    def line_7a(self, x_re, x_im, pn: PseudonormResult):
        """``z = x - j (j^H x)/||j||^2`` with the x-side compensation of the LUT exponent."""
        p = self.profile
        fj, fx = p.frac("j_tilde"), p.frac("x")
        jr, ji = pn.re, pn.im
        nj = np.sum(jr * jr + ji * ji, axis=-1)
        ok = ~np.asarray(pn.degenerate)
        nj_safe = np.where(ok, nj, 1 << (2 * fj))
        mant, e = recip_j_norm(nj_safe, 2 * fj, p.lut_j)
        xs_re = self._shift_x(x_re, e)
        xs_im = self._shift_x(x_im, e)
        jx_re, jx_im = _inner(jr, ji, xs_re, xs_im)
        k = fj + fx + p.lut_j.value_frac_bits - p.frac("coef")
        c_re = self.narrow(jx_re * mant, k, "coef")
        c_im = self.narrow(jx_im * mant, k, "coef")
        return self.subtract_projection(x_re, x_im, jr, ji, c_re, c_im, ok)

    def _shift_x(self, x, e):
        e = np.asarray(e).reshape(np.shape(e) + (1,))
        if x.dtype == object:
            e = e.astype(object)
        return saturate(_shift_right_array(x, e, self.profile.mode("x")), self.profile["x"])

    def subtract_projection(self, x_re, x_im, jr, ji, c_re, c_im, ok):
        p = self.profile
        fp = p.frac("j_tilde") + p.frac("coef")
        fx = p.frac("x")
        c_re = c_re[..., None]
        c_im = c_im[..., None]
        pr = jr * c_re - ji * c_im
        pi = jr * c_im + ji * c_re
        f = max(fx, fp)
        zr = _lshift(x_re, f - fx) - _lshift(pr, f - fp)
        zi = _lshift(x_im, f - fx) - _lshift(pi, f - fp)
        zr = self.narrow(zr, f - p.frac("z"), "z")
        zi = self.narrow(zi, f - p.frac("z"), "z")
        # no jammer direction: pass x straight through
        xr = self.narrow(x_re, fx - p.frac("z"), "z")
        xi = self.narrow(x_im, fx - p.frac("z"), "z")
        okb = np.asarray(ok)[..., None]
        return np.where(okb, zr, xr), np.where(okb, zi, xi)

    def tau_shift(self, z_re, z_im, exponent: int):
        p = self.profile
        fmt, mode = p["z"], p.mode("z")
        return (saturate(shift_round(z_re, -exponent, mode), fmt),
                saturate(shift_round(z_im, -exponent, mode), fmt))

    def line_8a(self, E_re, E_im, tz_re, tz_im):
        """``E^H (tau z)`` narrowed to the update format."""
        ur, ui = _mhv(E_re, E_im, tz_re, tz_im)
        return self.narrow_update(ur, ui)

    def narrow_update(self, ur, ui):
        p = self.profile
        k = p.frac("E") + p.frac("z") - p.frac("update")
        return self.narrow(ur, k, "update"), self.narrow(ui, k, "update")

    def line_9(self, s_re, s_im, u_re, u_im):
        """``s <- prox(s + conj(update))``."""
        p = self.profile
        fs, fu = p.frac("s_tilde"), p.frac("update")
        f = max(fs, fu)
        nr = _lshift(s_re, f - fs) + _lshift(u_re, f - fu)
        ni = _lshift(s_im, f - fs) - _lshift(u_im, f - fu)
        nr = self.narrow(nr, f - fs, "s_tilde")
        ni = self.narrow(ni, f - fs, "s_tilde")
        return self.prox(nr, ni)

    def prox(self, s_re, s_im):
        c = self.bound
        s_re = np.minimum(np.maximum(s_re, -c), c)
        s_im = np.minimum(np.maximum(s_im, -c), c)
        s_re[..., : self.T] = self.pilot_re
        s_im[..., : self.T] = self.pilot_im
        return s_re, s_im

    # -- full iteration -------------------------------------------------------

    def iterate(self, Y_re, Y_im, state: FxState, u_re, u_im, tau_exponent: int) -> FxState:
        s_re, s_im = state.s_re, state.s_im
        x_re, x_im = self.line_4a(Y_re, Y_im, s_re, s_im)
        E_re, E_im = self.line_4b(Y_re, Y_im, x_re, x_im, s_re, s_im)
        v_re, v_im = self.line_6a(E_re, E_im, u_re, u_im)
        jr, ji = self.line_6b(E_re, E_im, v_re, v_im)
        pn = self.pseudonorm(jr, ji)
        z_re, z_im = self.line_7a(x_re, x_im, pn)
        tz_re, tz_im = self.tau_shift(z_re, z_im, tau_exponent)
        up_re, up_im = self.line_8a(E_re, E_im, tz_re, tz_im)
        s_re, s_im = self.line_9(s_re.copy(), s_im.copy(), up_re, up_im)
        return FxState(state.iteration + 1, s_re, s_im, x_re, x_im, E_re, E_im,
                       pn.re, pn.im, pn.shift_applied, z_re, z_im)

    def run(self, Y_re, Y_im, schedule: StepSchedule, u_re, u_im, keep_trace: bool = False):
        """Run all iterations on a block stack ``(N, B, K)``.

        ``u_re``/``u_im`` have shape ``(N, t_max, B)``.
        """
        state = self.initial_state(Y_re.shape[:-2])
        trace = [state] if keep_trace else None
        for t, e in enumerate(schedule.tau_exponents):
            state = self.iterate(Y_re, Y_im, state, u_re[..., t, :], u_im[..., t, :], e)
            if keep_trace:
                trace.append(state)
        return state, trace

    def decisions(self, state: FxState) -> np.ndarray:
        a = QPSK_AMPLITUDE
        sr = np.asarray(state.s_re[..., self.T:])
        si = np.asarray(state.s_im[..., self.T:])
        return np.where(sr >= 0, a, -a) + 1j * np.where(si >= 0, a, -a)


def _shift_right_array(raw, k, mode: Rounding):
    """Per-element right shift by non-negative ``k`` with rounding."""
    q = raw >> k
    if Rounding(mode) is Rounding.TRUNCATE:
        return q
    rem = raw - (q << k)
    half = np.where(k > 0, (np.ones_like(k) << np.maximum(k - 1, 0)), 0)
    up = (k > 0) & ((rem > half) | ((rem == half) & ((q & 1) == 1)))
    return np.where(up, q + 1, q)


def draw_seed_signs(state: XorshiftState, B: int, t_max: int):
    """Integer ``(re, im)`` sign arrays ``(t_max, B)`` for one block, plus the next state."""
    ur = np.empty((t_max, B), dtype=np.int64)
    ui = np.empty((t_max, B), dtype=np.int64)
    for t in range(t_max):
        ur[t], ui[t], state = seed_vector_signs(state, B)
    return ur, ui, state


def run_maed_fx(
    Y: np.ndarray,
    pilots: np.ndarray,
    schedule: StepSchedule,
    t_max: int | None = None,
    profile: FxProfile | None = None,
    prng: XorshiftState | int = 1,
):
    """Quantize one float block, detect it in fixed point; returns ``(decisions, trace)``."""
    profile = profile or FxProfile.default()
    if t_max is not None:
        schedule = schedule.truncated(t_max)
    if not isinstance(prng, XorshiftState):
        prng = XorshiftState.from_seed(prng)
    B, K = Y.shape
    det = FxDetector(profile, pilots, K, B)
    Y_re, Y_im = det.quantize_input(Y[None])
    ur, ui, _ = draw_seed_signs(prng, B, schedule.t_max)
    ur = ur[None].astype(det.dtype)
    ui = ui[None].astype(det.dtype)
    state, trace = det.run(Y_re, Y_im, schedule, ur, ui, keep_trace=True)
    return det.decisions(state)[0], [st.block(0) for st in trace]
