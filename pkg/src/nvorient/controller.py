"""Closed-loop fabrication: seed, anneal until an NV appears, classify its
orientation from a polarization scan and re-anneal until it matches the
target class.

The controller talks to the bench only through the instrument interfaces
and never looks at the simulated site state.
"""
from __future__ import annotations

import collections
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .emission import (
    Classification,
    EmissionConfig,
    PatternFit,
    PolarizationPattern,
    classify,
    fit_pattern,
)
from .geometry import OrientationClass, SurfaceCut, resolve_class
from .hal.interfaces import Bench
from .photonics import ConfocalImage, CountTrace

HALF_PI = math.pi / 2


@dataclass(frozen=True)
class FabricationPlan:
    surface: SurfaceCut = SurfaceCut.CUT111
    rows: int = 3
    cols: int = 3
    pitch_um: float = 10.0
    depth_um: float = 20.0
    target: str = "A111"
    anneal_timeout_s: float = 120.0
    max_reseeds: int = 3
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "surface", SurfaceCut.parse(self.surface))
        object.__setattr__(self, "target", str(self.target))
        if isinstance(self.seed, str):
            object.__setattr__(self, "seed", int(self.seed))
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if not self.pitch_um > 0:
            raise ValueError("pitch must be positive")
        if not self.anneal_timeout_s > 0:
            raise ValueError("anneal timeout must be positive")
        if self.max_reseeds < 0:
            raise ValueError("max_reseeds must be >= 0")
        self.target_class  # raises for a target the surface cannot resolve

    @property
    def target_class(self) -> OrientationClass:
        return resolve_class(self.surface, self.target)

    def site_position(self, i: int, j: int) -> tuple[float, float, float]:
        return (i * self.pitch_um, j * self.pitch_um, self.depth_um)

    def sites(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.rows) for j in range(self.cols)]


@dataclass(frozen=True)
class ControllerConfig:
    dwell_s: float = 0.01
    k_sigma: float = 5.0
    m_bins: int = 3
    n_angles: int = 19
    photon_budget: float = 1e4
    fast_mode: bool = True
    slice_s: float = 10.0
    pre_train_s: float = 0.1
    background_s: float = 0.2
    background_offset_um: float = 5.0
    probe_s: float = 0.01
    max_angle_dwell_s: float = 5.0
    min_margin: float = 4.0
    azimuth_offset: float = 0.0

    def __post_init__(self):
        if not self.k_sigma > 0:
            raise ValueError("k_sigma must be positive")
        if self.m_bins < 1:
            raise ValueError("m_bins must be >= 1")
        if self.n_angles < 5:
            raise ValueError("at least 5 HWP angles are needed")
        if not (self.dwell_s > 0 and self.photon_budget > 0 and self.slice_s > 0):
            raise ValueError("dwell, budget and slice must be positive")

    def hwp_angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (HALF_PI / self.n_angles)


@dataclass
class SiteLog:
    site: tuple[int, int]
    events: list[tuple[float, str, dict]] = field(default_factory=list)

    def kinds(self) -> list[str]:
        return [e[1] for e in self.events]

    def of_kind(self, kind: str) -> list[tuple[float, str, dict]]:
        return [e for e in self.events if e[1] == kind]

    @property
    def outcome(self) -> str:
        for _, kind, _ in reversed(self.events):
            if kind in ("Success", "Failure"):
                return kind
        return "Incomplete"

    @property
    def cycles(self) -> int:
        return len(self.of_kind("Classified"))

    @property
    def reseeds(self) -> int:
        return len(self.of_kind("Reseed"))

    @property
    def final_class(self) -> Optional[int]:
        classified = self.of_kind("Classified")
        return classified[-1][2]["class_id"] if classified else None

    @property
    def initial_class(self) -> Optional[int]:
        classified = self.of_kind("Classified")
        return classified[0][2]["class_id"] if classified else None


class _Recorder:
    """Mirrors controller events into the SiteLog and the bench record stream."""

    def __init__(self, bench: Bench, log: SiteLog):
        self.bench = bench
        self.log = log

    def __call__(self, kind: str, payload: Optional[dict] = None) -> None:
        payload = payload or {}
        self.log.events.append((self.bench.time, kind, payload))
        self.bench.note(kind, payload)


# ----------------------------------------------------------------- detection


def threshold(background_rate: float, cfg: ControllerConfig) -> float:
    """Per-bin count threshold, background + k sigma with Poisson sigma."""
    mu = background_rate * cfg.dwell_s
    return mu + cfg.k_sigma * math.sqrt(mu)


class RunDetector:
    """Fires once ``m`` consecutive samples sit on one side of a threshold."""

    __slots__ = ("level", "m", "above", "run")

    def __init__(self, level: float, m: int, above: bool = True):
        self.level, self.m, self.above, self.run = level, m, above, 0

    def push(self, value: float) -> bool:
        hit = value > self.level if self.above else value < self.level
        self.run = self.run + 1 if hit else 0
        return self.run >= self.m


def detect_formation(trace: CountTrace, cfg: ControllerConfig, background_rate: float) -> Optional[float]:
    """Time at the end of the first run of M bins above background + k sigma."""
    if abs(trace.bin_width - cfg.dwell_s) > 1e-12:
        raise ValueError("trace bin width must equal the detection dwell")
    det = RunDetector(threshold(background_rate, cfg), cfg.m_bins)
    for i, c in enumerate(trace.counts.tolist()):
        if det.push(c):
            return trace.start + (i + 1) * trace.bin_width
    return None


def measure_background(bench: Bench, cfg: ControllerConfig, position: tuple[float, float, float]) -> float:
    """Background rate (counts/s) from an unseeded spot beside ``position``.

    The stage is left back at ``position``.
    """
    x, y, z = position
    bench.move_to(x + cfg.background_offset_um, y, z)
    counts = bench.acquire(cfg.background_s)
    bench.move_to(x, y, z)
    return counts / cfg.background_s


# ------------------------------------------------------------------ patterns


def measure_pattern(
    bench: Bench,
    cfg: ControllerConfig,
    budget: Optional[float] = None,
    record=None,
) -> PolarizationPattern:
    """Scan the HWP over the configured angles; one count per angle.

    The dwell per angle is set from a short probe at two orthogonal analyzer
    settings, whose mean is the pattern mean, so that each angle collects
    ``budget`` expected counts.
    """
    if bench.train_active():
        raise RuntimeError("pattern measurement requested while the train is on")
    budget = cfg.photon_budget if budget is None else budget
    probe = 0
    for alpha in (0.0, math.pi / 4):
        bench.set_angle(alpha)
        probe += bench.acquire(cfg.probe_s)
    rate = max(probe, 1) / (2 * cfg.probe_s)
    dwell = min(budget / rate, cfg.max_angle_dwell_s)
    dwell = max(round(dwell, 6), 1e-6)
    alphas = cfg.hwp_angles()
    thetas, counts = [], []
    for alpha in alphas:
        bench.set_angle(float(alpha))
        counts.append(bench.acquire(dwell))
        thetas.append((2.0 * alpha) % math.pi)
    counts_arr = np.asarray(counts, dtype=float)
    order = np.argsort(thetas)
    p = PolarizationPattern(
        np.asarray(thetas)[order],
        counts_arr[order],
        np.sqrt(np.maximum(counts_arr[order], 1.0)),
    )
    if record is not None:
        fit = fit_pattern(p) if counts_arr.any() else None
        record(
            "PatternMeasured",
            {
                "dwell_s": dwell,
                "theta": p.angles.tolist(),
                "counts": [int(c) for c in p.intensities],
                "fit": fit.to_dict() if fit else None,
            },
        )
    return p


def fast_mode_bias(
    bench: Bench,
    surface: SurfaceCut,
    cfg: ControllerConfig,
    fit: Optional[PatternFit] = None,
) -> float:
    """HWP angle that puts the analyzer at the pattern minimum (Cut100 only).

    Without a ``fit`` the HWP is scanned at the detection dwell first. The
    fitted minimum is used rather than the raw argmin, which on a 19-point
    scan is off by up to half a step.
    """
    if SurfaceCut.parse(surface) is not SurfaceCut.CUT100:
        raise ValueError("fast mode needs a (100) surface; (111) level changes are not distinctive")
    if fit is None:
        fit = fit_pattern(measure_pattern(bench, cfg, budget=cfg.photon_budget / 10))
    theta_min = (fit.azimuth + HALF_PI) % math.pi
    return theta_min / 2.0


# ---------------------------------------------------------------- site loop


class _Site:
    """Mutable per-site bookkeeping for ``reorient_until``."""

    def __init__(self, bench, plan, cfg, record, background_rate):
        self.bench, self.plan, self.cfg, self.record = bench, plan, cfg, record
        self.bg = background_rate
        self.thr = threshold(background_rate, cfg)
        self.train_since_seed = 0.0
        self.reseeds = 0

    def seed(self) -> None:
        self.bench.seed_pulse()
        self.record("Seed", {"reseeds": self.reseeds})
        self.train_since_seed = 0.0

    def reseed_or_fail(self) -> bool:
        """True if a reseed was applied, False once the reseed budget is spent."""
        if self.reseeds >= self.plan.max_reseeds:
            self.record("Failure", {"reason": "timeout", "reseeds": self.reseeds})
            return False
        self.reseeds += 1
        self.record("Reseed", {"count": self.reseeds, "train_s": self.train_since_seed})
        self.seed()
        return True

    def train_on(self) -> None:
        self.bench.train_on()
        self.record("TrainOn")

    def train_off(self) -> None:
        self.bench.train_off()
        self.record("TrainOff")

    def timed_out(self) -> bool:
        return self.train_since_seed >= self.plan.anneal_timeout_s

    def acquire(self) -> int:
        self.train_since_seed += self.cfg.dwell_s
        return self.bench.acquire(self.cfg.dwell_s)

    def wait_for_emitter(self) -> bool:
        """Run the train until M bins clear the threshold; False on timeout."""
        det = RunDetector(self.thr, self.cfg.m_bins)
        self.train_on()
        while not self.timed_out():
            if det.push(self.acquire()):
                self.train_off()
                self.record("FormationDetected", {"threshold": self.thr})
                return True
        self.train_off()
        return False

    def watch_anneal(self, pre_level: float, fast: bool) -> None:
        """Train on until a dip and a recovery are seen or the slice ends."""
        cfg = self.cfg
        dip = RunDetector(self.thr, cfg.m_bins, above=False)
        rec = RunDetector(self.thr, cfg.m_bins)
        dipped = False
        recent: collections.deque = collections.deque(maxlen=cfg.m_bins)
        slice_end = self.train_since_seed + cfg.slice_s
        self.train_on()
        while self.train_since_seed < slice_end and not self.timed_out():
            c = self.acquire()
            recent.append(c)
            if not dipped:
                if dip.push(c):
                    dipped = True
                    self.record("DipDetected", {"threshold": self.thr})
            elif rec.push(c):
                post = sum(recent) / (len(recent) * cfg.dwell_s)
                payload = {"pre_rate": pre_level, "post_rate": post}
                if pre_level > 0:
                    payload["ratio"] = post / pre_level
                payload["fast_mode"] = fast
                self.record("RecoveryDetected", payload)
                break
        self.train_off()


def reorient_until(
    bench: Bench,
    site: tuple[int, int],
    plan: FabricationPlan,
    cfg: ControllerConfig = ControllerConfig(),
    emission: EmissionConfig = EmissionConfig(),
    background_rate: Optional[float] = None,
) -> SiteLog:
    """Fabricate one site until its NV lies in the plan's target class."""
    log = SiteLog(tuple(site))
    if hasattr(bench, "site_label"):
        bench.site_label = tuple(site)
    record = _Recorder(bench, log)
    position = plan.site_position(*site)
    bench.move_to(*position)
    if background_rate is None:
        background_rate = measure_background(bench, cfg, position)
    target = plan.target_class
    fast = cfg.fast_mode and plan.surface is SurfaceCut.CUT100
    s = _Site(bench, plan, cfg, record, background_rate)
    s.seed()
    need_emitter = True
    while True:
        if need_emitter:
            if not s.wait_for_emitter():
                if not s.reseed_or_fail():
                    return log
                continue
            need_emitter = False

        result = _measure_and_classify(bench, plan, cfg, emission, background_rate, record)
        if result is None:
            # no emitter signal: the NV is dark or gone, keep annealing
            need_emitter = True
            if s.timed_out() and not s.reseed_or_fail():
                return log
            continue
        fit, cls = result
        record(
            "Classified",
            {
                "class_id": cls.class_id,
                "class": cls.orientation.label,
                "margin": cls.margin if math.isfinite(cls.margin) else None,
                "visibility": cls.visibility,
                "reliable": cls.reliable,
            },
        )
        if cls.orientation.class_id == target.class_id:
            record("Success", {"class_id": cls.class_id, "class": cls.orientation.label, "cycles": log.cycles})
            return log

        if s.timed_out() and not s.reseed_or_fail():
            return log
        if fast:
            bench.set_angle(fast_mode_bias(bench, plan.surface, cfg, fit))
        else:
            bench.set_angle(fit.azimuth / 2.0)
        pre = bench.acquire(cfg.pre_train_s) / cfg.pre_train_s
        s.watch_anneal(pre, fast)


def _measure_and_classify(bench, plan, cfg, emission, background_rate, record):
    """Pattern + classification, repeated once at double budget if unreliable."""
    budget = cfg.photon_budget
    for attempt in range(2):
        p = measure_pattern(bench, cfg, budget, record)
        if not p.intensities.any():
            return None
        dwell = record.log.events[-1][2]["dwell_s"]
        fit = fit_pattern(p)
        if fit.a0 <= 0:
            return None
        cls = classify(
            fit,
            plan.surface,
            azimuth_offset=cfg.azimuth_offset,
            background=background_rate * dwell,
            config=emission,
            min_margin=cfg.min_margin,
            k_sigma=cfg.k_sigma,
        )
        if cls.reason.startswith("no emitter"):
            return None
        if cls.reliable or attempt == 1:
            return fit, cls
        budget *= 2
    raise AssertionError("unreachable")


# ----------------------------------------------------------------- campaign


@dataclass
class CampaignReport:
    plan: FabricationPlan
    logs: list[SiteLog]
    image: Optional[ConfocalImage] = None

    @property
    def successes(self) -> int:
        return sum(log.outcome == "Success" for log in self.logs)

    def cycle_histogram(self) -> dict[int, int]:
        return dict(sorted(collections.Counter(log.cycles for log in self.logs if log.outcome == "Success").items()))

    def initial_tally(self) -> dict[int, int]:
        return dict(sorted(collections.Counter(log.initial_class for log in self.logs if log.initial_class).items()))

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site_i", "site_j", "outcome", "cycles", "reseeds", "final_class"])
        for log in self.logs:
            final = log.final_class
            w.writerow([log.site[0], log.site[1], log.outcome, log.cycles, log.reseeds, "" if final is None else final])
        return buf.getvalue()

    def image_region(self) -> tuple[float, float, float, float]:
        margin = self.plan.pitch_um / 2
        return (
            -margin,
            -margin,
            (self.plan.rows - 1) * self.plan.pitch_um + margin,
            (self.plan.cols - 1) * self.plan.pitch_um + margin,
        )


def run_campaign(
    plan: FabricationPlan,
    bench: Bench,
    cfg: ControllerConfig = ControllerConfig(),
    emission: EmissionConfig = EmissionConfig(),
    image_pitch_um: Optional[float] = 0.1,
) -> CampaignReport:
    """Visit every site row-major, then take a confocal image of the array.

    Site (i, j) sits at x = i * pitch, y = j * pitch. The background rate is
    calibrated once, beside the first site.
    """
    logs = []
    background = None
    for site in plan.sites():
        if background is None:
            background = measure_background(bench, cfg, plan.site_position(*site))
        logs.append(reorient_until(bench, site, plan, cfg, emission, background))
    report = CampaignReport(plan, logs)
    if image_pitch_um:
        if hasattr(bench, "site_label"):
            bench.site_label = None
        report.image = bench.scan(report.image_region(), image_pitch_um)
    return report
