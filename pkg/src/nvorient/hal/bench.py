"""Simulated fabrication bench.

The bench owns a simulated clock (integer nanoseconds), one kinetic
process per site and every random stream. Sites are identified by the
commanded stage position quantized to a 0.5 um grid; the pulse gate acts on
the site under the current commanded position.

Every command is appended to ``records`` together with what it observed,
which is what the JSONL log and replay are built from.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .. import rng as rngmod
from ..config import to_dict
from ..emission import EmissionConfig, normalized_value
from ..geometry import NvAxis, SurfaceCut, axis_in_lab
from ..kinetics import KineticsConfig, NvPresent, Pristine, SiteProcess, uniform_axis
from ..photonics import ConfocalImage, synthesize_confocal_image
from .interfaces import BenchError
from .protocol import Command

SITE_GRID_UM = 0.5
NS = 1_000_000_000


@dataclass(frozen=True)
class StageModel:
    """Mock translation stage: fixed calibration error plus per-move jitter (um)."""

    accuracy_um: float = 1.0
    repeatability_um: float = 0.05


@dataclass(frozen=True)
class ScannerModel:
    psf_sigma_um: float = 0.25


@dataclass
class EventRecord:
    t: float
    event: str
    site: Optional[list]
    data: dict

    def to_json_obj(self) -> dict:
        return {"t": self.t, "event": self.event, "site": self.site, "data": self.data}


def image_digest(image: ConfocalImage) -> str:
    return hashlib.sha256(np.ascontiguousarray(image.data, dtype="<f8").tobytes()).hexdigest()


class _AxisScript:
    """Replaces random axis draws with a fixed sequence, then falls back to uniform."""

    def __init__(self, axes: Sequence[NvAxis]):
        self.queue = list(axes)

    def __call__(self, rng: np.random.Generator) -> NvAxis:
        if self.queue:
            return self.queue.pop(0)
        return uniform_axis(rng)


class MockBench:
    def __init__(
        self,
        kinetics: KineticsConfig = KineticsConfig(),
        emission: EmissionConfig = EmissionConfig(),
        seed: int = 0,
        surface: SurfaceCut = SurfaceCut.CUT111,
        stage: StageModel = StageModel(),
        scanner: ScannerModel = ScannerModel(),
        axis_script: Sequence[NvAxis] = (),
        record: bool = True,
    ):
        if seed is None:
            raise ValueError("an explicit seed is required")
        self.kinetics = kinetics
        self.emission = emission
        self.seed = int(seed)
        self.surface = SurfaceCut.parse(surface)
        self.stage_model = stage
        self.scanner_model = scanner
        self.axis_script = tuple(NvAxis.parse(a) for a in axis_script)
        self._draw_axis = _AxisScript(self.axis_script) if self.axis_script else uniform_axis
        self.record = record
        self.records: list[EventRecord] = []
        self.site_label: Optional[tuple[int, int]] = None

        self.clock_ns = 0
        self._rate_hz = int(round(kinetics.pulses.rate_hz))
        if abs(self._rate_hz - kinetics.pulses.rate_hz) > 1e-6:
            raise ValueError("the mock bench needs a whole-number repetition rate in Hz")
        self._sites: dict[tuple[int, int, int], SiteProcess] = {}
        self._commanded = (0.0, 0.0, 0.0)
        self._position = (0.0, 0.0, 0.0)
        self._hwp = 0.0
        self._train_on = False
        self._train_start_ns = 0
        self._pulses_done = 0
        self._pattern_cache: dict[tuple, float] = {}

        self._counter_rng = rngmod.stream(self.seed, rngmod.STREAM_COUNTER)
        self._stage_rng = rngmod.stream(self.seed, rngmod.STREAM_STAGE)
        cal = rngmod.stream(self.seed, rngmod.STREAM_STAGE, "calibration")
        half = stage.accuracy_um / math.sqrt(3.0)
        self._stage_offset = tuple(float(v) for v in cal.uniform(-half, half, size=3))

    # ------------------------------------------------------------ metadata

    def header(self) -> dict:
        return {
            "seed": self.seed,
            "surface": self.surface.value,
            "kinetics": to_dict(self.kinetics),
            "emission": to_dict(self.emission),
            "stage": to_dict(self.stage_model),
            "scanner": to_dict(self.scanner_model),
            "axis_script": [a.name for a in self.axis_script],
        }

    @property
    def time(self) -> float:
        return self.clock_ns / NS

    def _log(self, event: str, data: dict) -> None:
        if self.record:
            site = list(self.site_label) if self.site_label is not None else None
            self.records.append(EventRecord(self.time, event, site, data))

    def note(self, event: str, data: Optional[dict] = None) -> None:
        """Record a non-command event (controller bookkeeping) at the current time."""
        self._log(event, data or {})

    # --------------------------------------------------------------- sites

    @staticmethod
    def site_key(x: float, y: float, z: float) -> tuple[int, int, int]:
        return tuple(int(round(c / SITE_GRID_UM)) for c in (x, y, z))

    def _site(self) -> SiteProcess:
        key = self.site_key(*self._commanded)
        proc = self._sites.get(key)
        if proc is None:
            rng = rngmod.stream(self.seed, rngmod.STREAM_KINETICS, *key)
            proc = SiteProcess(Pristine(), self.kinetics, rng, self._draw_axis)
            self._sites[key] = proc
        return proc

    def site_state(self, x: Optional[float] = None, y: float = 0.0, z: float = 0.0):
        """Ground-truth state (for tests and analysis, not for the controller)."""
        if x is None:
            return self._site().state
        key = self.site_key(x, y, z)
        proc = self._sites.get(key)
        if proc is None:
            return Pristine()
        return proc.state

    def prepare_site(self, x: float, y: float, z: float, state) -> None:
        """Preload a site's state (scripted scenarios); not a logged command."""
        key = self.site_key(x, y, z)
        if key not in self._sites:
            rng = rngmod.stream(self.seed, rngmod.STREAM_KINETICS, *key)
            self._sites[key] = SiteProcess(state, self.kinetics, rng, self._draw_axis)
        else:
            self._sites[key].set_state(state)

    def sites(self) -> dict:
        return {key: proc.state for key, proc in self._sites.items()}

    # ---------------------------------------------------------------- stage

    def move_to(self, x: float, y: float, z: float) -> tuple[float, float, float]:
        target = (float(x), float(y), float(z))
        if not all(math.isfinite(v) for v in target):
            raise BenchError("stage target must be finite")
        if self._train_on:
            self._sync_pulses()
        self._commanded = target
        jitter = self._stage_rng.normal(0.0, self.stage_model.repeatability_um, size=3)
        self._position = tuple(
            float(t + o + j) for t, o, j in zip(target, self._stage_offset, jitter)
        )
        self._log("MOVE", {"args": list(target), "position": list(self._position)})
        return self._position

    def position(self) -> tuple[float, float, float]:
        return self._position

    # ------------------------------------------------------------ rotator

    def set_angle(self, angle: float) -> None:
        angle = float(angle)
        if not math.isfinite(angle):
            raise BenchError("HWP angle must be finite")
        self._hwp = angle
        self._log("HWP", {"args": [angle], "theta": self.analyzer_angle})

    def angle(self) -> float:
        return self._hwp

    @property
    def analyzer_angle(self) -> float:
        """Analyzer angle behind the half-wave plate, 2 * alpha mod pi."""
        return (2.0 * self._hwp) % math.pi

    # --------------------------------------------------------------- gate

    def seed_pulse(self) -> None:
        proc = self._site()
        if self._train_on:
            self._sync_pulses()
        proc.seed()
        self._log("SEED", {})

    def train_on(self) -> None:
        if not self._train_on:
            self._train_on = True
            self._train_start_ns = self.clock_ns
            self._pulses_done = 0
        self._log("TRAIN", {"args": ["ON"]})

    def train_off(self) -> None:
        self._train_on = False
        self._log("TRAIN", {"args": ["OFF"]})

    def train_active(self) -> bool:
        return self._train_on

    def _pulse_count(self, t_ns: int) -> int:
        return int((t_ns - self._train_start_ns) * self._rate_hz // NS)

    def _sync_pulses(self) -> None:
        # pulses already emitted at the current clock are applied before a state change
        due = self._pulse_count(self.clock_ns) - self._pulses_done
        if due > 0:
            self._site().advance(due)
            self._pulses_done += due

    # ------------------------------------------------------------ counter

    def _rate(self, state) -> float:
        cfg = self.kinetics
        if not isinstance(state, NvPresent):
            return cfg.background
        theta = self.analyzer_angle
        key = (state.axis, theta)
        value = self._pattern_cache.get(key)
        if value is None:
            value = normalized_value(axis_in_lab(state.axis, self.surface), theta, self.emission)
            self._pattern_cache[key] = value
        return cfg.background + cfg.brightness * value

    def acquire(self, dwell: float) -> int:
        """Count photons for ``dwell`` seconds; the clock advances by the dwell."""
        if not dwell > 0 or not math.isfinite(dwell):
            raise BenchError("dwell must be a positive number of seconds")
        t0 = self.time
        dt_ns = int(round(dwell * NS))
        end_ns = self.clock_ns + dt_ns
        proc = self._site()
        if self._train_on:
            self._sync_pulses()
            start_state = proc.state
            due = self._pulse_count(end_ns) - self._pulses_done
            events = proc.advance(due) if due > 0 else []
            expected = 0.0
            seg_start = self.clock_ns
            state = start_state
            for k, new_state in events:
                t_k = self._train_start_ns + (self._pulses_done + k) * NS / self._rate_hz
                expected += self._rate(state) * (t_k - seg_start) / NS
                seg_start, state = t_k, new_state
            expected += self._rate(state) * (end_ns - seg_start) / NS
            self._pulses_done += max(due, 0)
        else:
            expected = self._rate(proc.state) * dt_ns / NS
        self.clock_ns = end_ns
        counts = int(self._counter_rng.poisson(max(expected, 0.0)))
        if self.record:
            site = list(self.site_label) if self.site_label is not None else None
            self.records.append(
                EventRecord(t0, "ACQ", site, {"args": [float(dwell)], "theta": self.analyzer_angle, "counts": counts})
            )
        return counts

    # ------------------------------------------------------------ scanner

    def emitters(self) -> list[tuple[float, float, float]]:
        out = []
        for key, proc in sorted(self._sites.items()):
            if isinstance(proc.state, NvPresent):
                out.append((key[0] * SITE_GRID_UM, key[1] * SITE_GRID_UM, self.kinetics.brightness))
        return out

    def scan(self, region, pitch: float) -> ConfocalImage:
        x0, y0, x1, y1 = (float(v) for v in region)
        try:
            image = synthesize_confocal_image(
                self.emitters(),
                psf_sigma=self.scanner_model.psf_sigma_um,
                region=(x0, y0, x1, y1),
                pixel_pitch=float(pitch),
                background=self.kinetics.background,
            )
        except ValueError as exc:
            raise BenchError(str(exc)) from None
        self._log(
            "SCAN",
            {
                "args": [x0, y0, x1, y1, float(pitch)],
                "shape": list(image.data.shape),
                "sha256": image_digest(image),
            },
        )
        return image

    # ------------------------------------------------------------ dispatch

    def execute(self, cmd: Command):
        v, a = cmd.verb, cmd.args
        if v == "MOVE":
            return self.move_to(*a)
        if v == "HWP":
            return self.set_angle(a[0])
        if v == "SEED":
            return self.seed_pulse()
        if v == "TRAIN":
            return self.train_on() if a[0] == "ON" else self.train_off()
        if v == "ACQ":
            return self.acquire(a[0])
        if v == "SCAN":
            return self.scan(a[:4], a[4])
        raise BenchError(f"unsupported command {v}")


def bind_mock(
    kinetics: KineticsConfig = KineticsConfig(),
    emission: EmissionConfig = EmissionConfig(),
    seed: int = 0,
    surface: SurfaceCut = SurfaceCut.CUT111,
    **kwargs,
) -> MockBench:
    return MockBench(kinetics, emission, seed, surface, **kwargs)
