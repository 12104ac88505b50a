"""
Cycle-level model of the 32-PE array (4 slices x 8 PEs).

PE ``j`` of slice ``i`` owns row ``j`` of the 8x8 tile ``Y_i`` (columns
``8i .. 8i+7``) and, after line 4b, the matching row of ``E``. Matrix-vector
products use Cannon's rotation: in the forward form the vector operands
circulate around each slice ring while the partial sums stay put; in the
Hermitian form the operands stay put and the partial sums circulate, so
``E^H z`` is formed without a transposed copy of ``E``.

Every simulated cycle is ticked explicitly and checked against the phase
table in ``data/schedule.json``. Multiply-accumulates are exact Python
integers; narrowing, LUTs and prox reuse the scalar stages of
:class:`~maed.fixed.FxDetector`, so the array state can be compared
mantissa-for-mantissa with the vectorized model.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .channel import SystemDims
from .fixed import FxDetector, FxProfile, FxState, pseudonormalize, recip_j_norm, recip_s_norm
from .numerics import saturate, shift_round
from .prng import XorshiftState, seed_vector_signs
from .reference import StepSchedule

N_SLICES = 4
SLICE_WIDTH = 8


class ScheduleError(AssertionError):
    """A phase used a different number of cycles than the schedule table allows."""


class OwnershipError(AssertionError):
    """A PE touched a tile row it does not own."""


@dataclass(frozen=True)
class Phase:
    name: str
    line: str
    kind: str
    cycles: int
    steps: dict


@dataclass(frozen=True)
class ScheduleTable:
    phases: tuple
    cycles_per_iteration: int
    overhead_cycles: int

    def __post_init__(self):
        for ph in self.phases:
            if sum(ph.steps.values()) != ph.cycles:
                raise ScheduleError(f"phase {ph.name}: steps sum to {sum(ph.steps.values())}, not {ph.cycles}")
        total = sum(ph.cycles for ph in self.phases)
        if total != self.cycles_per_iteration:
            raise ScheduleError(f"phases sum to {total}, table says {self.cycles_per_iteration}")

    def __getitem__(self, name: str) -> Phase:
        for ph in self.phases:
            if ph.name == name:
                return ph
        raise KeyError(name)

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleTable":
        phases = tuple(Phase(p["name"], p["line"], p["kind"], int(p["cycles"]), dict(p["steps"])) for p in d["phases"])
        return cls(phases, int(d["cycles_per_iteration"]), int(d.get("overhead_cycles", 0)))

    @classmethod
    def load(cls, path=None) -> "ScheduleTable":
        if path is None:
            text = resources.files("maed").joinpath("data/schedule.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


@dataclass
class CycleReport:
    phases: dict = field(default_factory=dict)
    mv_8x32: int = 0
    hermitian_mv: int = 0
    row_scale: int = 0
    inner8: int = 0
    iteration_total: int = 0
    block_total: int | None = None
    multiplies: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class PE:
    """One processing element: accumulator, exchange register, multiplier counter."""

    def __init__(self, slice_idx: int, row: int):
        self.id = (slice_idx, row)
        self.acc = [0, 0]
        self.op = (0, 0)
        self.tag = None
        self.reg = (0, 0)
        self.mults = 0

    def mac(self, a, b, conj_a=False, conj_b=False):
        ar, ai = a
        br, bi = b
        if conj_a:
            ai = -ai
        if conj_b:
            bi = -bi
        self.acc[0] += ar * br - ai * bi
        self.acc[1] += ar * bi + ai * br
        self.mults += 1


class TileMemory:
    """Row storage with static ownership: row ``(i, j)`` is readable only by PE ``(i, j)``."""

    def __init__(self):
        self._rows: dict = {}
        self.reads = 0

    def store(self, name: str, owner, re, im):
        self._rows[(name, owner)] = ([int(v) for v in re], [int(v) for v in im])

    def read(self, requester, name: str, owner, col: int):
        if requester != owner:
            raise OwnershipError(f"PE {requester} read row {owner} of {name}")
        re, im = self._rows[(name, owner)]
        self.reads += 1
        return re[col], im[col]

    def write(self, requester, name: str, owner, col: int, value):
        if requester != owner:
            raise OwnershipError(f"PE {requester} wrote row {owner} of {name}")
        self._rows.setdefault((name, owner), ([0] * SLICE_WIDTH, [0] * SLICE_WIDTH))
        re, im = self._rows[(name, owner)]
        re[col], im[col] = int(value[0]), int(value[1])

    def matrix(self, name: str):
        B, K = SLICE_WIDTH, SLICE_WIDTH * N_SLICES
        re = np.zeros((B, K), dtype=object)
        im = np.zeros((B, K), dtype=object)
        for i in range(N_SLICES):
            for j in range(SLICE_WIDTH):
                r, m = self._rows[(name, (i, j))]
                re[j, SLICE_WIDTH * i:SLICE_WIDTH * (i + 1)] = r
                im[j, SLICE_WIDTH * i:SLICE_WIDTH * (i + 1)] = m
        return re, im


def _obj(values):
    a = np.empty(len(values), dtype=object)
    a[:] = [int(v) for v in values]
    return a


class PeArray:
    """Lock-step emulator of the MAED processing array for ``B = 8``, ``K = 32``."""

    def __init__(
        self,
        profile: FxProfile,
        pilots: np.ndarray,
        table: ScheduleTable | None = None,
        prng: XorshiftState | int = 1,
        dims: SystemDims = SystemDims(),
    ):
        if dims.B != SLICE_WIDTH or dims.K != SLICE_WIDTH * N_SLICES:
            raise ValueError("the array is built for B=8, K=32")
        self.dims = dims
        self.profile = profile
        self.det = FxDetector(profile, pilots, dims.K, dims.B)
        self.table = table or ScheduleTable.load()
        self.prng = prng if isinstance(prng, XorshiftState) else XorshiftState.from_seed(prng)
        self.pes = [[PE(i, j) for j in range(SLICE_WIDTH)] for i in range(N_SLICES)]
        self.mem = TileMemory()
        self.cycle_counter = 0
        self.iteration = 0
        self.x_ff = ([0] * dims.B, [0] * dims.B)
        init = self.det.initial_state()
        self.s_ff = ([int(v) for v in init.s_re], [int(v) for v in init.s_im])
        self.last_state: FxState | None = None
        self._steps: Counter = Counter()

    # -- bookkeeping ----------------------------------------------------------

    def _tick(self, step: str, n: int = 1):
        self._steps[step] += n
        self.cycle_counter += n

    def _begin(self):
        self._steps = Counter()
        for row in self.pes:
            for pe in row:
                pe.mults = 0

    def _end(self, phase_name: str, report: CycleReport | None) -> int:
        ph = self.table[phase_name]
        used = dict(self._steps)
        if used != ph.steps:
            raise ScheduleError(f"phase {phase_name} used {used}, table expects {ph.steps}")
        cycles = sum(used.values())
        if report is not None:
            report.phases[phase_name] = cycles
            mults = sum(pe.mults for row in self.pes for pe in row)
            report.multiplies[ph.line] = report.multiplies.get(ph.line, 0) + mults
        return cycles

    def _drain(self, phase_name: str):
        n = self.table[phase_name].steps.get("drain", 0)
        if n:
            self._tick("drain", n)

    def store_tiles(self, name: str, A_re, A_im):
        """Distribute an 8x32 matrix so that PE ``(i, j)`` owns row ``j`` of tile ``i``."""
        for i in range(N_SLICES):
            cols = slice(SLICE_WIDTH * i, SLICE_WIDTH * (i + 1))
            for j in range(SLICE_WIDTH):
                self.mem.store(name, (i, j), A_re[j, cols], A_im[j, cols])

    def load(self, Y_re, Y_im):
        """Load a quantized receive block and charge the per-block overhead."""
        self.store_tiles("Y", Y_re, Y_im)
        self.cycle_counter += self.table.overhead_cycles

    # -- dataflow primitives --------------------------------------------------

    def cannon_mv(self, name: str, parts, conj_operand: bool, phase: str = "y_conj_s"):
        """``sum_i A_i op_i`` (or with ``conj(op_i)``) over the four slices.

        ``parts[i]`` is the 8-vector of ``(re, im)`` operands of slice ``i``.
        Returns the 8 exact accumulators held by slice 0 after the
        cross-slice reduction.
        """
        self._begin()
        self._tick("load")
        for i, row in enumerate(self.pes):
            for j, pe in enumerate(row):
                pe.acc = [0, 0]
                pe.op = parts[i][j]
                pe.tag = j
        for r in range(SLICE_WIDTH):
            for i, row in enumerate(self.pes):
                for j, pe in enumerate(row):
                    col = (j + r) % SLICE_WIDTH
                    assert pe.tag == col
                    a = self.mem.read(pe.id, name, pe.id, col)
                    pe.mac(a, pe.op, conj_b=conj_operand)
                # circular shift of operands: PE j takes the operand of PE j+1
                ops = [(pe.op, pe.tag) for pe in row]
                for j, pe in enumerate(row):
                    pe.op, pe.tag = ops[(j + 1) % SLICE_WIDTH]
            self._tick("rounds")
        for i, row in enumerate(self.pes):
            for j, pe in enumerate(row):
                if pe.tag != j or pe.op != parts[i][j]:
                    raise AssertionError(f"operand of PE {pe.id} did not return to its owner")
        stride = 1
        while stride < N_SLICES:
            for i in range(0, N_SLICES, 2 * stride):
                for j in range(SLICE_WIDTH):
                    dst, src = self.pes[i][j], self.pes[i + stride][j]
                    dst.acc[0] += src.acc[0]
                    dst.acc[1] += src.acc[1]
            stride *= 2
            self._tick("reduction")
        self._drain(phase)
        return [tuple(pe.acc) for pe in self.pes[0]]

    def cannon_mv_hermitian(self, name: str, z, phase: str = "eh_u"):
        """``A^H z`` with ``z`` fixed in PE ``j`` of every slice and rotating accumulators.

        Returns 32 exact accumulators; entry ``8i + j`` ends in PE ``(i, j)``.
        """
        self._begin()
        self._tick("load")
        for row in self.pes:
            for j, pe in enumerate(row):
                pe.reg = z[j]
                pe.acc = [0, 0]
                pe.tag = j
        for r in range(SLICE_WIDTH):
            for row in self.pes:
                for j, pe in enumerate(row):
                    col = (j + r) % SLICE_WIDTH
                    assert pe.tag == col
                    a = self.mem.read(pe.id, name, pe.id, col)
                    pe.mac(a, pe.reg, conj_a=True)
                # partial sums move one PE back around the ring
                accs = [(pe.acc, pe.tag) for pe in row]
                for j, pe in enumerate(row):
                    pe.acc, pe.tag = accs[(j + 1) % SLICE_WIDTH]
            self._tick("rounds")
        out = []
        for row in self.pes:
            for j, pe in enumerate(row):
                if pe.tag != j:
                    raise AssertionError(f"partial sum {pe.tag} ended in PE {pe.id}")
                out.append(tuple(pe.acc))
        self._drain(phase)
        return out

    def row_scale_update(self, x, s_parts, phase: str = "residual"):
        """Line 4b: PE ``(i, j)`` writes ``E_i[j, :] = Y_i[j, :] - x_j s_i^T`` while ``s_i`` rotates."""
        det = self.det
        fp = self.profile.frac("x") + self.profile.frac("s_tilde")
        self._begin()
        self._tick("load")
        for i, row in enumerate(self.pes):
            for j, pe in enumerate(row):
                pe.reg = x[j]
                pe.op = s_parts[i][j]
                pe.tag = j
        for r in range(SLICE_WIDTH):
            for row in self.pes:
                for j, pe in enumerate(row):
                    col = pe.tag
                    y = self.mem.read(pe.id, "Y", pe.id, col)
                    pe.acc = [0, 0]
                    pe.mac(pe.reg, pe.op)
                    e = det.residual_from_products(y[0], y[1], pe.acc[0], pe.acc[1], fp)
                    self.mem.write(pe.id, "E", pe.id, col, e)
                ops = [(pe.op, pe.tag) for pe in row]
                for j, pe in enumerate(row):
                    pe.op, pe.tag = ops[(j + 1) % SLICE_WIDTH]
            self._tick("rounds")
        self._drain(phase)

    def inner_product_8(self, a, b, phase: str = "j_energy"):
        """``a^H b`` on slice 0: one multiply cycle, a 3-stage adder tree, one output cycle."""
        self._begin()
        vals = []
        for j, pe in enumerate(self.pes[0]):
            pe.acc = [0, 0]
            pe.mac(a[j], b[j], conj_a=True)
            vals.append(tuple(pe.acc))
        self._tick("multiply")
        while len(vals) > 1:
            vals = [(vals[k][0] + vals[k + 1][0], vals[k][1] + vals[k + 1][1]) for k in range(0, len(vals), 2)]
            self._tick("tree")
        self._drain(phase)
        return vals[0]

    def s_norm_tree(self):
        """``||s||^2`` from 32 per-PE squared magnitudes and a 5-stage adder tree."""
        self._begin()
        vals = []
        for i, row in enumerate(self.pes):
            for j, pe in enumerate(row):
                k = SLICE_WIDTH * i + j
                s = (self.s_ff[0][k], self.s_ff[1][k])
                pe.acc = [0, 0]
                pe.mac(s, s, conj_a=True)
                vals.append(pe.acc[0])
        self._tick("multiply")
        while len(vals) > 1:
            vals = [vals[k] + vals[k + 1] for k in range(0, len(vals), 2)]
            self._tick("tree")
        return vals[0]

    # -- one iteration --------------------------------------------------------

    def _s_parts(self):
        return [[(self.s_ff[0][SLICE_WIDTH * i + j], self.s_ff[1][SLICE_WIDTH * i + j])
                 for j in range(SLICE_WIDTH)] for i in range(N_SLICES)]

    def run_iteration(self, tau_exponent: int) -> CycleReport:
        p, det = self.profile, self.det
        rep = CycleReport()
        start = self.cycle_counter

        ns = self.s_norm_tree()
        self._end("s_norm", rep)

        self._begin()
        mant_s, e_s = recip_s_norm(ns, 2 * p.frac("s_tilde"), p.lut_s, det.ns_bounds)
        self._tick("lookup")
        self._end("recip_s", rep)

        acc = self.cannon_mv("Y", self._s_parts(), conj_operand=True, phase="y_conj_s")
        rep.mv_8x32 = self._end("y_conj_s", rep)

        self._begin()
        k = p.frac("Y") + p.frac("s_tilde") + p.lut_s.value_frac_bits + e_s - p.frac("x")
        x = [(det.narrow(a[0] * mant_s, k, "x"), det.narrow(a[1] * mant_s, k, "x")) for a in acc]
        for pe in self.pes[0]:
            pe.mults += 1
        self.x_ff = ([v[0] for v in x], [v[1] for v in x])
        self._tick("multiply")
        self._end("x_scale", rep)

        self.row_scale_update(x, self._s_parts())
        rep.row_scale = self._end("residual", rep)

        self._begin()
        ur, ui, self.prng = seed_vector_signs(self.prng, self.dims.B)
        u = [(int(a), int(b)) for a, b in zip(ur, ui)]
        self._tick("draw")
        self._end("prng", rep)

        v_acc = self.cannon_mv_hermitian("E", u, phase="eh_u")
        rep.hermitian_mv = self._end("eh_u", rep)
        kv = p.frac("E") - p.frac("v")
        v = [(det.narrow(a[0], kv, "v"), det.narrow(a[1], kv, "v")) for a in v_acc]
        v_parts = [v[SLICE_WIDTH * i:SLICE_WIDTH * (i + 1)] for i in range(N_SLICES)]

        j_acc = self.cannon_mv("E", v_parts, conj_operand=False, phase="e_v")
        self._end("e_v", rep)

        self._begin()
        pn = pseudonormalize(_obj([a[0] for a in j_acc]), _obj([a[1] for a in j_acc]),
                             det.jacc_frac, p["j_tilde"])
        self._tick("lod")
        self._tick("shift")
        self._end("pseudonorm", rep)
        jv = [(int(a), int(b)) for a, b in zip(pn.re, pn.im)]
        degenerate = bool(pn.degenerate)

        nj = self.inner_product_8(jv, jv, phase="j_energy")[0]
        rep.inner8 = self._end("j_energy", rep)

        self._begin()
        nj_eff = nj if not degenerate else 1 << (2 * p.frac("j_tilde"))
        mant_j, e_j = recip_j_norm(nj_eff, 2 * p.frac("j_tilde"), p.lut_j)
        self._tick("lookup")
        self._end("recip_j", rep)

        fx_fmt, mode_x = p["x"], p.mode("x")
        xs = [(saturate(shift_round(a, e_j, mode_x), fx_fmt), saturate(shift_round(b, e_j, mode_x), fx_fmt))
              for a, b in x]
        jx = self.inner_product_8(jv, xs, phase="j_dot_x")
        self._end("j_dot_x", rep)

        self._begin()
        kc = p.frac("j_tilde") + p.frac("x") + p.lut_j.value_frac_bits - p.frac("coef")
        c_re = det.narrow(jx[0] * mant_j, kc, "coef")
        c_im = det.narrow(jx[1] * mant_j, kc, "coef")
        for pe in self.pes[0]:
            pe.mults += 1
        self._tick("multiply")
        z_re, z_im = det.subtract_projection(
            _obj(self.x_ff[0])[None], _obj(self.x_ff[1])[None], _obj(pn.re)[None], _obj(pn.im)[None],
            _obj([c_re]), _obj([c_im]), np.array([not degenerate]),
        )
        tz_re, tz_im = det.tau_shift(z_re[0], z_im[0], tau_exponent)
        self._tick("subtract_shift")
        self._end("z_update", rep)

        tz = [(int(a), int(b)) for a, b in zip(tz_re, tz_im)]
        up_acc = self.cannon_mv_hermitian("E", tz, phase="eh_tz")
        self._end("eh_tz", rep)

        self._begin()
        up_re, up_im = det.narrow_update(_obj([a[0] for a in up_acc]), _obj([a[1] for a in up_acc]))
        s_re, s_im = det.line_9(_obj(self.s_ff[0]), _obj(self.s_ff[1]), up_re, up_im)
        self.s_ff = ([int(v) for v in s_re], [int(v) for v in s_im])
        self._tick("update")
        self._end("prox", rep)

        rep.iteration_total = self.cycle_counter - start
        if rep.iteration_total != self.table.cycles_per_iteration:
            raise ScheduleError(f"iteration took {rep.iteration_total} cycles, budget {self.table.cycles_per_iteration}")
        self.iteration += 1
        E_re, E_im = self.mem.matrix("E")
        self.last_state = FxState(
            self.iteration, _obj(self.s_ff[0]), _obj(self.s_ff[1]),
            _obj(self.x_ff[0]), _obj(self.x_ff[1]), E_re, E_im,
            _obj(pn.re), _obj(pn.im), int(pn.shift_applied), _obj(z_re[0]), _obj(z_im[0]),
        )
        return rep

    def run_block(self, Y_re, Y_im, schedule: StepSchedule):
        """Load a quantized block and run every iteration; returns ``(reports, states, block_total)``."""
        start = self.cycle_counter
        self.load(Y_re, Y_im)
        reports, states = [], []
        for e in schedule.tau_exponents:
            reports.append(self.run_iteration(e))
            states.append(self.last_state)
        total = self.cycle_counter - start
        for r in reports:
            r.block_total = total
        return reports, states, total


def _scratch_array(A_re, A_im, name: str) -> PeArray:
    arr = PeArray(FxProfile.default(), np.full(4, (1 + 1j) / np.sqrt(2)))
    arr.store_tiles(name, np.asarray(A_re, dtype=object), np.asarray(A_im, dtype=object))
    return arr


def _pairs(re, im):
    return [(int(a), int(b)) for a, b in zip(re, im)]


def cannon_mv(A_re, A_im, s_re, s_im, conj_operand: bool = True):
    """Standalone forward product ``A conj(s)`` (or ``A s``) of integer mantissas.

    Returns ``((re, im), cycles)`` with exact 8-entry accumulators.
    """
    arr = _scratch_array(A_re, A_im, "A")
    s = _pairs(s_re, s_im)
    parts = [s[SLICE_WIDTH * i:SLICE_WIDTH * (i + 1)] for i in range(N_SLICES)]
    before = arr.cycle_counter
    out = arr.cannon_mv("A", parts, conj_operand)
    return (_obj([o[0] for o in out]), _obj([o[1] for o in out])), arr.cycle_counter - before


def cannon_mv_hermitian(A_re, A_im, z_re, z_im):
    """Standalone ``A^H z``; returns ``((re, im), cycles)`` with 32 exact accumulators."""
    arr = _scratch_array(A_re, A_im, "A")
    before = arr.cycle_counter
    out = arr.cannon_mv_hermitian("A", _pairs(z_re, z_im))
    return (_obj([o[0] for o in out]), _obj([o[1] for o in out])), arr.cycle_counter - before


def row_scale_update(Y_re, Y_im, x_re, x_im, s_re, s_im, profile: FxProfile | None = None):
    """Standalone line 4b; returns ``((E_re, E_im), cycles)``."""
    arr = _scratch_array(Y_re, Y_im, "Y")
    if profile is not None:
        arr.profile = profile
        arr.det = FxDetector(profile, np.full(4, (1 + 1j) / np.sqrt(2)), 32, 8)
    s = _pairs(s_re, s_im)
    parts = [s[SLICE_WIDTH * i:SLICE_WIDTH * (i + 1)] for i in range(N_SLICES)]
    before = arr.cycle_counter
    arr.row_scale_update(_pairs(x_re, x_im), parts)
    return arr.mem.matrix("E"), arr.cycle_counter - before


def inner_product_8(a_re, a_im, b_re, b_im):
    """Standalone ``a^H b`` on one slice; returns ``((re, im), cycles)``."""
    arr = PeArray(FxProfile.default(), np.full(4, (1 + 1j) / np.sqrt(2)))
    before = arr.cycle_counter
    out = arr.inner_product_8(_pairs(a_re, a_im), _pairs(b_re, b_im))
    return out, arr.cycle_counter - before


def throughput_model(f_clk_hz: float, t_max: int, dims: SystemDims = SystemDims(), overhead_cycles: int = 5,
                     cycles_per_iteration: int = 83) -> float:
    """QPSK data throughput in bit/s: ``f_clk * 2D / (t_max * cycles + overhead)``."""
    return f_clk_hz * 2 * dims.D / (t_max * cycles_per_iteration + overhead_cycles)


def calibrate_overhead(f_clk_hz: float, target_bps: float, t_max: int, dims: SystemDims = SystemDims(),
                       cycles_per_iteration: int = 83) -> int:
    """Largest per-block overhead that still meets ``target_bps``."""
    budget = f_clk_hz * 2 * dims.D / target_bps
    return math.floor(budget + 1e-9) - t_max * cycles_per_iteration
