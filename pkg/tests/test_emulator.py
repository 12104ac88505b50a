import json

import numpy as np
import pytest

from maed.channel import JammerKind, JammerSpec, SystemDims, default_pilots, synthesize_block
from maed.emulator import (
    CycleReport,
    OwnershipError,
    PeArray,
    ScheduleError,
    ScheduleTable,
    TileMemory,
    calibrate_overhead,
    cannon_mv,
    cannon_mv_hermitian,
    inner_product_8,
    row_scale_update,
    throughput_model,
)
from maed.fixed import FxDetector, FxProfile, _inner, _mhv, _mv, _mv_conj, draw_seed_signs
from maed.numerics import Rounding
from maed.prng import XorshiftState
from maed.reference import StepSchedule

PILOTS = default_pilots(4)
DIMS = SystemDims()
TUNED = StepSchedule((-4, -2, -4, -4, -2, -3, -3, -3, -3, -3))
STATE_FIELDS = ("s_re", "s_im", "x_re", "x_im", "E_re", "E_im", "j_re", "j_im", "z_re", "z_im")


def rand_mantissas(rng, shape, bits=16):
    return rng.integers(-(2**bits), 2**bits, size=shape).astype(object)


def identity_tiles():
    return np.hstack([np.eye(8, dtype=np.int64)] * 4).astype(object), np.zeros((8, 32), dtype=object)


class TestCannonMv:
    def test_identity_tiles_select_first_columns(self):
        I, Z = identity_tiles()
        s = np.zeros(32, dtype=object)
        s[0] = 1
        (re, im), cycles = cannon_mv(I, Z, s, np.zeros(32, dtype=object))
        assert re.tolist() == [1, 0, 0, 0, 0, 0, 0, 0] and not np.any(im)
        assert cycles == 13

    def test_random_matches_vectorized(self):
        rng = np.random.default_rng(0)
        for conj in (True, False):
            Ar, Ai = rand_mantissas(rng, (8, 32)), rand_mantissas(rng, (8, 32))
            sr, si = rand_mantissas(rng, 32), rand_mantissas(rng, 32)
            (re, im), cycles = cannon_mv(Ar, Ai, sr, si, conj_operand=conj)
            want = (_mv_conj if conj else _mv)(Ar, Ai, sr, si)
            assert re.tolist() == want[0].tolist() and im.tolist() == want[1].tolist()
            assert cycles == 13


class TestCannonHermitian:
    def test_identity_tiles_repeat_z(self):
        I, Z = identity_tiles()
        z = np.arange(1, 9).astype(object)
        (re, im), cycles = cannon_mv_hermitian(I, Z, z, -z)
        assert re.tolist() == list(range(1, 9)) * 4
        assert im.tolist() == [-v for v in range(1, 9)] * 4
        assert cycles == 10

    def test_random_matches_vectorized(self):
        rng = np.random.default_rng(1)
        Ar, Ai = rand_mantissas(rng, (8, 32)), rand_mantissas(rng, (8, 32))
        zr, zi = rand_mantissas(rng, 8), rand_mantissas(rng, 8)
        (re, im), cycles = cannon_mv_hermitian(Ar, Ai, zr, zi)
        want = _mhv(Ar, Ai, zr, zi)
        assert re.tolist() == want[0].tolist() and im.tolist() == want[1].tolist()
        assert cycles == 10


class TestRowScale:
    def test_zero_x_copies_y(self):
        rng = np.random.default_rng(2)
        Yr, Yi = rand_mantissas(rng, (8, 32), 12), rand_mantissas(rng, (8, 32), 12)
        s = rand_mantissas(rng, 32, 11)
        (Er, Ei), cycles = row_scale_update(Yr, Yi, [0] * 8, [0] * 8, s, s)
        assert Er.tolist() == Yr.tolist() and Ei.tolist() == Yi.tolist()
        assert cycles == 12

    def test_random_matches_line_4b(self):
        rng = np.random.default_rng(3)
        prof = FxProfile.default()
        det = FxDetector(prof, PILOTS, 32, 8)
        Yr, Yi = rand_mantissas(rng, (8, 32), 14), rand_mantissas(rng, (8, 32), 14)
        xr, xi = rand_mantissas(rng, 8, 14), rand_mantissas(rng, 8, 14)
        sr, si = rand_mantissas(rng, 32, 11), rand_mantissas(rng, 32, 11)
        (Er, Ei), cycles = row_scale_update(Yr, Yi, xr, xi, sr, si, prof)
        want = det.line_4b(Yr, Yi, xr, xi, sr, si)
        assert Er.tolist() == want[0].tolist() and Ei.tolist() == want[1].tolist()
        assert cycles == 12


class TestInnerProduct:
    def test_unit_vector(self):
        e1 = [1] + [0] * 7
        assert inner_product_8(e1, [0] * 8, e1, [0] * 8) == ((1, 0), 5)

    def test_random_matches_vectorized(self):
        rng = np.random.default_rng(4)
        ar, ai, br, bi = (rand_mantissas(rng, 8) for _ in range(4))
        (re, im), cycles = inner_product_8(ar, ai, br, bi)
        want = _inner(ar, ai, br, bi)
        assert (re, im) == (want[0], want[1])
        assert cycles == 5


class TestTileOwnership:
    def test_foreign_read_rejected(self):
        mem = TileMemory()
        mem.store("Y", (0, 1), [0] * 8, [0] * 8)
        with pytest.raises(OwnershipError):
            mem.read((0, 2), "Y", (0, 1), 0)
        with pytest.raises(OwnershipError):
            mem.write((1, 1), "E", (0, 1), 0, (0, 0))


class TestScheduleTable:
    def test_shipped_table(self):
        t = ScheduleTable.load()
        assert t.cycles_per_iteration == 83 == sum(p.cycles for p in t.phases)
        assert t.overhead_cycles == 5
        kinds = {p.kind: p.cycles for p in t.phases}
        assert (kinds["mv_8x32"], kinds["hermitian_mv"], kinds["row_scale"], kinds["inner8"]) == (13, 10, 12, 5)

    def test_inconsistent_table_rejected(self):
        d = json.loads(json.dumps(_table_dict()))
        d["phases"][0]["cycles"] += 1
        with pytest.raises(ScheduleError):
            ScheduleTable.from_dict(d)
        d = _table_dict()
        d["phases"][0]["cycles"] += 1
        d["phases"][0]["steps"]["tree"] += 1
        with pytest.raises(ScheduleError):
            ScheduleTable.from_dict(d)

    def test_overrun_detected(self, tmp_path):
        # a table asking for fewer drain cycles than the dataflow uses must trip the assertion
        d = _table_dict()
        for p in d["phases"]:
            if p["name"] == "y_conj_s":
                p["steps"]["reduction"] = 1
                p["steps"]["drain"] = 3
        table = ScheduleTable.from_dict(d)
        arr = PeArray(FxProfile.default(), PILOTS, table)
        det = FxDetector(FxProfile.default(), PILOTS, 32, 8)
        blk = synthesize_block(np.random.default_rng(0), DIMS, JammerSpec(), 10.0)
        Yr, Yi = det.quantize_input(blk.Y)
        arr.load(Yr.astype(object), Yi.astype(object))
        with pytest.raises(ScheduleError):
            arr.run_iteration(-3)


def _table_dict():
    from importlib import resources
    return json.loads(resources.files("maed").joinpath("data/schedule.json").read_text())


def run_both(profile, kind, snr_db, seed, schedule=TUNED):
    blk = synthesize_block(np.random.default_rng(seed), DIMS, JammerSpec(kind, 30.0), snr_db)
    det = FxDetector(profile, PILOTS, 32, 8)
    Yr, Yi = det.quantize_input(blk.Y[None])
    ur, ui, _ = draw_seed_signs(XorshiftState.from_seed(seed), 8, schedule.t_max)
    _, trace = det.run(Yr, Yi, schedule, ur[None].astype(det.dtype), ui[None].astype(det.dtype), keep_trace=True)
    arr = PeArray(profile, PILOTS, prng=XorshiftState.from_seed(seed))
    reports, states, total = arr.run_block(np.asarray(Yr[0], dtype=object), np.asarray(Yi[0], dtype=object), schedule)
    return trace, reports, states, total, arr


class TestRunIteration:
    @pytest.mark.parametrize("kind", list(JammerKind))
    def test_bit_exact_every_iteration(self, kind):
        trace, reports, states, total, _ = run_both(FxProfile.default(), kind, 12.0, 17)
        assert len(states) == 10
        for st, ref in zip(states, trace[1:]):
            ref = ref.block(0)
            for name in STATE_FIELDS:
                assert np.array_equal(np.asarray(getattr(st, name), dtype=object),
                                      np.asarray(getattr(ref, name), dtype=object)), name
            assert int(st.j_shift) == int(ref.j_shift)

    @pytest.mark.parametrize("profile", [FxProfile.uniform(20), FxProfile.default().with_rounding(Rounding.NEAREST_EVEN)],
                             ids=["wide", "nearest-even"])
    def test_bit_exact_other_profiles(self, profile):
        trace, _, states, _, _ = run_both(profile, JammerKind.SPARSE, 6.0, 5, StepSchedule.uniform(-3, 4))
        for st, ref in zip(states, trace[1:]):
            ref = ref.block(0)
            for name in STATE_FIELDS:
                assert np.array_equal(np.asarray(getattr(st, name), dtype=object),
                                      np.asarray(getattr(ref, name), dtype=object)), name

    def test_cycle_counts(self):
        _, reports, _, total, arr = run_both(FxProfile.default(), JammerKind.BARRAGE, 16.0, 3)
        for rep in reports:
            assert (rep.mv_8x32, rep.hermitian_mv, rep.row_scale, rep.inner8, rep.iteration_total) == (13, 10, 12, 5, 83)
            assert rep.iteration_total == sum(rep.phases.values())
            assert rep.multiplies["6a"] + rep.multiplies["6b"] == 512
            assert rep.block_total == total
        assert total == 830 + 5
        assert arr.cycle_counter == total

    def test_cycle_counter_monotone(self):
        arr = PeArray(FxProfile.default(), PILOTS)
        det = FxDetector(FxProfile.default(), PILOTS, 32, 8)
        blk = synthesize_block(np.random.default_rng(1), DIMS, JammerSpec(), 10.0)
        Yr, Yi = det.quantize_input(blk.Y)
        arr.load(Yr.astype(object), Yi.astype(object))
        seen = [arr.cycle_counter]
        for _ in range(3):
            arr.run_iteration(-3)
            seen.append(arr.cycle_counter)
        assert all(b - a == 83 for a, b in zip(seen, seen[1:]))

    def test_report_serializes(self):
        rep = CycleReport(phases={"a": 1}, iteration_total=83, block_total=835)
        assert json.loads(json.dumps(rep.to_dict()))["block_total"] == 835

    def test_dims_checked(self):
        with pytest.raises(ValueError):
            PeArray(FxProfile.default(), PILOTS, dims=SystemDims(4, 32, 4))


class TestThroughput:
    def test_calibrated_overhead(self):
        # 1.492e9 * 56 / 100e6 = 835.52 cycles per block; 830 go to ten iterations
        assert 1.492e9 * 56 / 100e6 == pytest.approx(835.52)
        assert calibrate_overhead(1.492e9, 100e6, 10) == 5
        assert throughput_model(1.492e9, 10, DIMS, 5) == pytest.approx(1.492e9 * 56 / 835)
        assert throughput_model(1.492e9, 10, DIMS, 5) == pytest.approx(100e6, abs=0.5e6)

    def test_zero_overhead_upper_bound(self):
        assert throughput_model(1.492e9, 10, DIMS, 0) / 1e6 == pytest.approx(100.66, abs=0.01)

    def test_doubling_iterations_halves(self):
        one = throughput_model(1.492e9, 10, DIMS, 5)
        two = throughput_model(1.492e9, 20, DIMS, 5)
        assert two == pytest.approx(one * 835 / 1665)
        assert abs(two / one - 0.5) < 5 / 835
