"""
Monte Carlo engine for BER sweeps, the cycle audit and step-size tuning.

Every trial draws its block from its own 64-bit seed, derived by hashing
the master seed with the operating point and the trial index. The seed does
not depend on the receiver, so all receivers see the same blocks, and
chunked parallel execution gives the same totals as a serial run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import metadata, resources

import numpy as np
from scipy.stats import binomtest

from .baselines import detect_ls_lmmse
from .channel import JammerKind, JammerSpec, SystemDims, default_pilots, synthesize_block
from .emulator import PeArray, ScheduleTable, throughput_model
from .fixed import FxDetector, FxProfile, draw_seed_signs
from .prng import XorshiftState
from .reference import StepSchedule, draw_seed_vectors, maed_iterations, slice_qpsk, symbol_bits

RECEIVERS = ("maed_float", "maed_fixed", "lmmse")
CSV_COLUMNS = ("receiver", "jammer", "rho_db", "snr_db", "bits", "errors", "ber", "ci_lo", "ci_hi", "seed")
PHASE_TARGETS = {"mv_8x32": 13, "hermitian_mv": 10, "row_scale": 12, "inner8": 5, "iteration_total": 83}


class ConfigError(ValueError):
    """Invalid sweep configuration."""


class AuditError(AssertionError):
    """A cycle-audit or runtime invariant check failed."""


def _sig9(x: float) -> float:
    return float(f"{x:.9g}")


@dataclass
class TuningConfig:
    snr_db: float = 16.0
    trials_per_jammer: int = 1000
    exponent_range: tuple = (-6, 1)
    refinement_passes: int = 1
    jammers: list | None = None  # None: tune on every jammer of the sweep

    def to_dict(self) -> dict:
        return {
            "snr_db": self.snr_db,
            "trials_per_jammer": self.trials_per_jammer,
            "exponent_range": list(self.exponent_range),
            "refinement_passes": self.refinement_passes,
            "jammers": None if self.jammers is None else [j.to_dict() for j in self.jammers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TuningConfig":
        jam = d.get("jammers")
        return cls(
            float(d.get("snr_db", 16.0)),
            int(d.get("trials_per_jammer", 1000)),
            tuple(int(e) for e in d.get("exponent_range", (-6, 1))),
            int(d.get("refinement_passes", 1)),
            None if jam is None else [JammerSpec.from_dict(j) for j in jam],
        )


def _default_jammers() -> list:
    return [JammerSpec(k, 30.0) for k in JammerKind]


@dataclass
class SweepConfig:
    dims: SystemDims = field(default_factory=SystemDims)
    jammers: list = field(default_factory=_default_jammers)
    snr_grid_db: list = field(default_factory=lambda: [float(s) for s in range(0, 17, 2)])
    receivers: list = field(default_factory=lambda: list(RECEIVERS))
    t_max: int = 10
    schedule: StepSchedule = field(default_factory=lambda: StepSchedule.uniform(-3, 10))
    profile: FxProfile = field(default_factory=FxProfile.default)
    trials_per_point: int = 2000
    master_seed: int = 1
    output_path: str = "ber.csv"
    workers: int = 1
    chunk_size: int = 250
    pilots: list | None = None
    f_clk_hz: float = 1.492e9
    overhead_cycles: int = 5
    target_throughput_bps: float = 100e6
    tuning: TuningConfig = field(default_factory=TuningConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.trials_per_point < 1:
            raise ConfigError("trials_per_point must be at least 1")
        if not self.snr_grid_db:
            raise ConfigError("snr_grid_db must not be empty")
        if not self.jammers:
            raise ConfigError("at least one jammer is required")
        unknown = set(self.receivers) - set(RECEIVERS)
        if unknown or not self.receivers:
            raise ConfigError(f"receivers must be a non-empty subset of {RECEIVERS}")
        if self.t_max < 1:
            raise ConfigError("t_max must be at least 1")
        if self.workers < 1 or self.chunk_size < 1:
            raise ConfigError("workers and chunk_size must be positive")
        if not 0 <= self.master_seed < 1 << 64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        if self.pilots is not None and len(self.pilots) != self.dims.T:
            raise ConfigError("pilot sequence length must equal T")

    @property
    def pilot_vector(self) -> np.ndarray:
        if self.pilots is None:
            return default_pilots(self.dims.T)
        return np.array([complex(p[0], p[1]) for p in self.pilots])

    @property
    def effective_schedule(self) -> StepSchedule:
        return self.schedule.truncated(self.t_max)

    def replace(self, **changes) -> "SweepConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return SweepConfig(**d)

    def to_dict(self) -> dict:
        return {
            "dims": self.dims.to_dict(),
            "jammers": [j.to_dict() for j in self.jammers],
            "snr_grid_db": list(self.snr_grid_db),
            "receivers": list(self.receivers),
            "t_max": self.t_max,
            "schedule": {"tau_exponents": list(self.schedule.tau_exponents)},
            "profile": self.profile.to_dict(),
            "trials_per_point": self.trials_per_point,
            "master_seed": self.master_seed,
            "output_path": self.output_path,
            "workers": self.workers,
            "chunk_size": self.chunk_size,
            "pilots": self.pilots,
            "f_clk_hz": self.f_clk_hz,
            "overhead_cycles": self.overhead_cycles,
            "target_throughput_bps": self.target_throughput_bps,
            "tuning": self.tuning.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        base = cls()
        try:
            kw = dict(
                dims=SystemDims(**d["dims"]) if "dims" in d else base.dims,
                jammers=[JammerSpec.from_dict(j) for j in d["jammers"]] if "jammers" in d else base.jammers,
                snr_grid_db=[float(s) for s in d.get("snr_grid_db", base.snr_grid_db)],
                receivers=list(d.get("receivers", base.receivers)),
                t_max=int(d.get("t_max", base.t_max)),
                schedule=StepSchedule(d["schedule"]["tau_exponents"]) if "schedule" in d else base.schedule,
                profile=FxProfile.from_dict(d["profile"]) if "profile" in d else base.profile,
                trials_per_point=int(d.get("trials_per_point", base.trials_per_point)),
                master_seed=int(d.get("master_seed", base.master_seed)),
                output_path=str(d.get("output_path", base.output_path)),
                workers=int(d.get("workers", base.workers)),
                chunk_size=int(d.get("chunk_size", base.chunk_size)),
                pilots=d.get("pilots"),
                f_clk_hz=float(d.get("f_clk_hz", base.f_clk_hz)),
                overhead_cycles=int(d.get("overhead_cycles", base.overhead_cycles)),
                target_throughput_bps=float(d.get("target_throughput_bps", base.target_throughput_bps)),
                tuning=TuningConfig.from_dict(d.get("tuning", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config: {exc}") from exc
        return cls(**kw)

    @classmethod
    def load(cls, path: str) -> "SweepConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def default(cls) -> "SweepConfig":
        """Shipped defaults, including the tuned step schedule."""
        text = resources.files("maed").joinpath("data/default_config.json").read_text()
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class BerRecord:
    receiver: str
    jammer_kind: str
    rho_db: float
    snr_db: float
    bits_total: int
    bit_errors: int
    ber: float
    ci_lo: float
    ci_hi: float
    seed: int

    @property
    def wilson_ci_95(self) -> tuple[float, float]:
        return self.ci_lo, self.ci_hi

    @classmethod
    def from_counts(cls, receiver, jammer: JammerSpec, snr_db, bits, errors, seed) -> "BerRecord":
        if bits < 1 or not 0 <= errors <= bits:
            raise AuditError(f"invalid counts {errors}/{bits}")
        ci = binomtest(int(errors), int(bits)).proportion_ci(0.95, method="wilson")
        lo = 0.0 if errors == 0 else _sig9(ci.low)
        hi = 1.0 if errors == bits else _sig9(ci.high)
        return cls(receiver, jammer.kind.value, float(jammer.rho_db), float(snr_db), int(bits), int(errors),
                   _sig9(errors / bits), lo, hi, int(seed))

    def csv_row(self) -> list:
        g = lambda x: f"{x:.9g}"  # noqa: E731
        return [self.receiver, self.jammer_kind, g(self.rho_db), g(self.snr_db), str(self.bits_total),
                str(self.bit_errors), g(self.ber), g(self.ci_lo), g(self.ci_hi), str(self.seed)]

    @classmethod
    def from_csv_row(cls, row: dict) -> "BerRecord":
        return cls(row["receiver"], row["jammer"], float(row["rho_db"]), float(row["snr_db"]), int(row["bits"]),
                   int(row["errors"]), float(row["ber"]), float(row["ci_lo"]), float(row["ci_hi"]), int(row["seed"]))


# -- seeding ------------------------------------------------------------------


def _hash64(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(repr(parts).encode())
    return int.from_bytes(h.digest(), "little")


def point_seed(master_seed: int, jammer: JammerSpec, snr_db: float, domain: str = "sweep") -> int:
    return _hash64(domain, int(master_seed), jammer.kind.value, float(jammer.rho_db), jammer.sparse_count,
                   float(snr_db))


def trial_seed(pseed: int, trial: int) -> int:
    return _hash64(int(pseed), int(trial))


# -- trial execution ----------------------------------------------------------


@dataclass
class TrialBatch:
    Y: np.ndarray
    data: np.ndarray
    N0: np.ndarray
    seeds: list


def synthesize_trials(cfg: SweepConfig, jammer: JammerSpec, snr_db: float, seeds) -> TrialBatch:
    pilots = cfg.pilot_vector
    Ys, data, N0 = [], [], []
    for sd in seeds:
        blk = synthesize_block(np.random.default_rng(sd), cfg.dims, jammer, snr_db, pilots)
        Ys.append(blk.Y)
        data.append(blk.data_symbols)
        N0.append(blk.truth.N0)
    return TrialBatch(np.array(Ys), np.array(data), np.array(N0), list(seeds))


def detect(receiver: str, batch: TrialBatch, cfg: SweepConfig) -> np.ndarray:
    """Hard data decisions ``(N, D)`` of one receiver on a batch of blocks."""
    pilots = cfg.pilot_vector
    sched = cfg.effective_schedule
    B = cfg.dims.B
    if receiver == "lmmse":
        return detect_ls_lmmse(batch.Y, pilots, batch.N0)
    if receiver == "maed_float":
        U = np.array([draw_seed_vectors(XorshiftState.from_seed(sd), B, sched.t_max)[0] for sd in batch.seeds])
        s, _ = maed_iterations(batch.Y, pilots, sched, U)
        return slice_qpsk(s[..., len(pilots):])
    if receiver == "maed_fixed":
        det = FxDetector(cfg.profile, pilots, cfg.dims.K, B)
        Yr, Yi = det.quantize_input(batch.Y)
        signs = [draw_seed_signs(XorshiftState.from_seed(sd), B, sched.t_max) for sd in batch.seeds]
        ur = np.array([u[0] for u in signs]).astype(det.dtype)
        ui = np.array([u[1] for u in signs]).astype(det.dtype)
        state, _ = det.run(Yr, Yi, sched, ur, ui)
        return det.decisions(state)
    raise ConfigError(f"unknown receiver {receiver!r}")


def count_bit_errors(decisions: np.ndarray, data: np.ndarray) -> int:
    return int(np.sum(symbol_bits(decisions) != symbol_bits(data)))


def _run_chunk(args) -> dict:
    cfg, jammer, snr_db, receivers, seeds = args
    batch = synthesize_trials(cfg, jammer, snr_db, seeds)
    return {r: count_bit_errors(detect(r, batch, cfg), batch.data) for r in receivers}


def _point_jobs(cfg: SweepConfig, jammer: JammerSpec, snr_db: float, receivers, n_trials: int, domain="sweep"):
    pseed = point_seed(cfg.master_seed, jammer, snr_db, domain)
    seeds = [trial_seed(pseed, t) for t in range(n_trials)]
    jobs = [(cfg, jammer, snr_db, tuple(receivers), seeds[i:i + cfg.chunk_size])
            for i in range(0, n_trials, cfg.chunk_size)]
    return pseed, seeds, jobs


def _execute(jobs, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_chunk(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_chunk, jobs))


def _check_distinct(seeds):
    if len(set(seeds)) != len(seeds):
        raise AuditError("trial seed collision")


def run_point(cfg: SweepConfig, jammer: JammerSpec, snr_db: float, receiver: str) -> BerRecord:
    """BER of one receiver at one operating point."""
    if receiver not in RECEIVERS:
        raise ConfigError(f"unknown receiver {receiver!r}")
    pseed, seeds, jobs = _point_jobs(cfg, jammer, snr_db, [receiver], cfg.trials_per_point)
    _check_distinct(seeds)
    errors = sum(r[receiver] for r in _execute(jobs, cfg.workers))
    bits = 2 * cfg.dims.D * cfg.trials_per_point
    return BerRecord.from_counts(receiver, jammer, snr_db, bits, errors, pseed)


def _sort_key(rec: BerRecord):
    return (rec.receiver, rec.jammer_kind, rec.rho_db, rec.snr_db)


def run_sweep(cfg: SweepConfig, write: bool = True) -> list:
    """Full receiver x jammer x SNR sweep; every block is shared by all receivers."""
    all_jobs, meta, all_seeds = [], [], []
    for jammer in cfg.jammers:
        for snr in cfg.snr_grid_db:
            pseed, seeds, jobs = _point_jobs(cfg, jammer, snr, cfg.receivers, cfg.trials_per_point)
            all_seeds.extend(seeds)
            meta.append((jammer, snr, pseed, len(all_jobs), len(jobs)))
            all_jobs.extend(jobs)
    _check_distinct(all_seeds)
    results = _execute(all_jobs, cfg.workers)
    bits = 2 * cfg.dims.D * cfg.trials_per_point
    records = []
    for jammer, snr, pseed, start, n in meta:
        for r in cfg.receivers:
            errors = sum(res[r] for res in results[start:start + n])
            records.append(BerRecord.from_counts(r, jammer, snr, bits, errors, pseed))
    records.sort(key=_sort_key)
    if write:
        write_csv(records, cfg.output_path)
        write_sidecar(records, cfg, cfg.output_path + ".json")
    return records


def write_csv(records, path: str):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow(rec.csv_row())


def read_csv(path: str) -> list:
    with open(path, newline="") as fh:
        return [BerRecord.from_csv_row(row) for row in csv.DictReader(fh)]


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def threshold_snr(records, receiver: str, jammer_kind: str, target: float = 0.01):
    """Lowest SNR from which the BER stays below ``target``, or None."""
    pts = sorted((r.snr_db, r.ber) for r in records if r.receiver == receiver and r.jammer_kind == jammer_kind)
    best = None
    for snr, ber in reversed(pts):
        if ber >= target:
            break
        best = snr
    return best


def write_sidecar(records, cfg: SweepConfig, path: str):
    thresholds = {f"{r}/{j.kind.value}": threshold_snr(records, r, j.kind.value)
                  for r in cfg.receivers for j in cfg.jammers}
    doc = {"code_version": code_version(), "config": cfg.to_dict(), "rows": len(records),
           "ber_below_1pct_from_snr_db": thresholds}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


# -- cycle audit ----------------------------------------------------------------


def run_cycle_audit(cfg: SweepConfig, table: ScheduleTable | None = None) -> dict:
    """Run the PE array on one seeded block and cross-check it against the vectorized model."""
    table = table or ScheduleTable.load()
    if table.overhead_cycles != cfg.overhead_cycles:
        table = ScheduleTable(table.phases, table.cycles_per_iteration, cfg.overhead_cycles)
    jammer = cfg.jammers[0]
    snr = max(cfg.snr_grid_db)
    seed = trial_seed(point_seed(cfg.master_seed, jammer, snr, "audit"), 0)
    pilots = cfg.pilot_vector
    blk = synthesize_block(np.random.default_rng(seed), cfg.dims, jammer, snr, pilots)
    sched = cfg.effective_schedule

    det = FxDetector(cfg.profile, pilots, cfg.dims.K, cfg.dims.B)
    Yr, Yi = det.quantize_input(blk.Y[None])
    ur, ui, _ = draw_seed_signs(XorshiftState.from_seed(seed), cfg.dims.B, sched.t_max)
    _, trace = det.run(Yr, Yi, sched, ur[None].astype(det.dtype), ui[None].astype(det.dtype), keep_trace=True)

    arr = PeArray(cfg.profile, pilots, table, XorshiftState.from_seed(seed), cfg.dims)
    reports, states, total = arr.run_block(np.asarray(Yr[0], dtype=object), np.asarray(Yi[0], dtype=object), sched)

    failures = []
    for t, (st, ref) in enumerate(zip(states, trace[1:]), start=1):
        ref = ref.block(0)
        for name in ("s_re", "s_im", "x_re", "x_im", "E_re", "E_im", "j_re", "j_im", "z_re", "z_im"):
            if not np.array_equal(np.asarray(getattr(st, name), dtype=object),
                                  np.asarray(getattr(ref, name), dtype=object)):
                failures.append(f"iteration {t}: {name} differs from the vectorized model")
        if int(st.j_shift) != int(ref.j_shift):
            failures.append(f"iteration {t}: pseudonorm shift differs")
    for rep in reports:
        for key, want in PHASE_TARGETS.items():
            if getattr(rep, key) != want:
                failures.append(f"{key} = {getattr(rep, key)}, expected {want}")
    want_total = sched.t_max * table.cycles_per_iteration + table.overhead_cycles
    if total != want_total:
        failures.append(f"block_total {total} != {want_total}")

    tput = throughput_model(cfg.f_clk_hz, sched.t_max, cfg.dims, table.overhead_cycles, table.cycles_per_iteration)
    return {
        "seed": seed,
        "t_max": sched.t_max,
        "iteration": reports[0].to_dict(),
        "block_total": total,
        "overhead_cycles": table.overhead_cycles,
        "line6_multiplies": reports[0].multiplies["6a"] + reports[0].multiplies["6b"],
        "f_clk_hz": cfg.f_clk_hz,
        "throughput_bps": tput,
        "bit_exact": not any("differs" in f for f in failures),
        "failures": failures,
    }


# -- step-size tuning ---------------------------------------------------------------


@dataclass
class TuningResult:
    schedule: StepSchedule
    evaluations: list
    bits: int

    def to_dict(self) -> dict:
        return {"schedule": list(self.schedule.tau_exponents), "bits_per_candidate": self.bits,
                "evaluations": self.evaluations}


def tune_step_schedule(cfg: SweepConfig) -> TuningResult:
    """Grid search over power-of-two step sizes with the float detector.

    A uniform pass over every exponent in ``exponent_range`` picks the
    starting schedule; each refinement pass then tries moving one
    iteration's exponent by +-1 and keeps strict improvements only.
    """
    tc = cfg.tuning
    jammers = tc.jammers or cfg.jammers
    lo, hi = tc.exponent_range
    t_max = cfg.t_max
    pilots = cfg.pilot_vector
    batches = []
    for jammer in jammers:
        _, seeds, _ = _point_jobs(cfg, jammer, tc.snr_db, ["maed_float"], tc.trials_per_jammer, "tune")
        batch = synthesize_trials(cfg, jammer, tc.snr_db, seeds)
        U = np.array([draw_seed_vectors(XorshiftState.from_seed(sd), cfg.dims.B, t_max)[0] for sd in seeds])
        batches.append((jammer, batch, U))
    bits = 2 * cfg.dims.D * tc.trials_per_jammer * len(batches)
    evaluations = []
    cache = {}

    def evaluate(exps: tuple) -> int:
        if exps in cache:
            return cache[exps]
        sched = StepSchedule(exps)
        per, total = {}, 0
        for jammer, batch, U in batches:
            s, _ = maed_iterations(batch.Y, pilots, sched, U)
            e = count_bit_errors(slice_qpsk(s[..., len(pilots):]), batch.data)
            per[jammer.kind.value] = e
            total += e
        cache[exps] = total
        evaluations.append({"tau_exponents": list(exps), "errors": total, "ber": total / bits, "per_jammer": per})
        return total

    best, best_err = None, None
    for e in range(lo, hi + 1):
        cand = (e,) * t_max
        err = evaluate(cand)
        if best_err is None or err < best_err:
            best, best_err = cand, err
    for _ in range(tc.refinement_passes):
        for t in range(t_max):
            for delta in (-1, 1):
                e = best[t] + delta
                if not lo <= e <= hi:
                    continue
                cand = best[:t] + (e,) + best[t + 1:]
                err = evaluate(cand)
                if err < best_err:
                    best, best_err = cand, err
    return TuningResult(StepSchedule(best), evaluations, bits)


# -- LUT dump ----------------------------------------------------------------------


def dump_lut(profile: FxProfile, which: str = "s") -> list:
    """Hex lines, one LUT entry each, zero-padded to the value width."""
    lut = {"s": profile.lut_s, "j": profile.lut_j}[which]
    digits = math.ceil(lut.value_width / 4)
    return [format(int(v), f"0{digits}x") for v in lut.table()]


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
