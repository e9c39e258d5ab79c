"""Stochastic state of a single laser-written site.

A seed pulse deposits a quantum of vacancies. Under the diffusion train a
vacancy-rich site forms an NV with a fixed per-pulse probability; an
existing NV can drop into a dark intermediate and re-form along a
uniformly drawn axis once the dark dwell expires.

``step_pulse`` advances by exactly one pulse. ``SiteProcess`` and
``simulate_train`` jump straight to the next transition using geometric
waiting times, which has the same law as pulse-by-pulse stepping but is
cheap enough for long trains.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .emission import EmissionConfig, normalized_value
from .geometry import AXES, NvAxis, SurfaceCut, axis_in_lab


@dataclass(frozen=True)
class Pristine:
    vacancies: int = 0
    kind = "Pristine"


@dataclass(frozen=True)
class VacancyRich:
    vacancies: int
    kind = "VacancyRich"


@dataclass(frozen=True)
class NvPresent:
    axis: NvAxis
    vacancies: int
    kind = "NvPresent"


@dataclass(frozen=True)
class DarkIntermediate:
    prior_axis: NvAxis
    vacancies: int
    remaining_dwell: int
    kind = "DarkIntermediate"


@dataclass(frozen=True)
class Depleted:
    vacancies: int = 0
    kind = "Depleted"


SiteState = Union[Pristine, VacancyRich, NvPresent, DarkIntermediate, Depleted]


def state_to_dict(s: SiteState) -> dict:
    out = {"kind": s.kind, "vacancies": s.vacancies}
    if isinstance(s, NvPresent):
        out["axis"] = s.axis.name
    elif isinstance(s, DarkIntermediate):
        out["prior_axis"] = s.prior_axis.name
        out["remaining_dwell"] = s.remaining_dwell
    return out


@dataclass(frozen=True)
class PulseParams:
    seed_energy_nj: float = 1.47
    diffusion_energy_nj: float = 1.19
    rep_rate_khz: float = 200.0
    seed_duration_fs: float = 270.0
    wavelength_nm: float = 515.0

    def __post_init__(self):
        if self.seed_energy_nj <= 0 or self.diffusion_energy_nj <= 0:
            raise ValueError("pulse energies must be positive")
        if self.rep_rate_khz <= 0:
            raise ValueError("repetition rate must be positive")

    @property
    def rate_hz(self) -> float:
        return self.rep_rate_khz * 1e3


@dataclass(frozen=True)
class KineticsConfig:
    p_form: float = 5e-6
    p_dissociate: float = 2e-6
    dark_dwell_mean: float = 2e5
    vacancies_per_seed: int = 20
    brightness: float = 5e4
    background: float = 5e3
    pulses: PulseParams = field(default_factory=PulseParams)

    def __post_init__(self):
        # zero is allowed so that formation or reorientation can be switched off
        for name in ("p_form", "p_dissociate"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {p}")
        if self.dark_dwell_mean < 1:
            raise ValueError("dark dwell mean must be at least one pulse")
        if self.vacancies_per_seed < 1:
            raise ValueError("vacancies_per_seed must be >= 1")
        if self.brightness < 0 or self.background < 0:
            raise ValueError("rates must be non-negative")


AxisDraw = Callable[[np.random.Generator], NvAxis]


def uniform_axis(rng: np.random.Generator) -> NvAxis:
    return AXES[int(rng.integers(4))]


def apply_seed(s: SiteState, cfg: KineticsConfig = KineticsConfig()) -> SiteState:
    v = s.vacancies + cfg.vacancies_per_seed
    if isinstance(s, (Pristine, Depleted, VacancyRich)):
        return VacancyRich(v)
    return replace(s, vacancies=v)


def _draw_dwell(cfg: KineticsConfig, rng: np.random.Generator) -> int:
    return int(rng.geometric(1.0 / cfg.dark_dwell_mean))


def _transition(
    s: SiteState, cfg: KineticsConfig, rng: np.random.Generator, draw_axis: AxisDraw
) -> SiteState:
    """State reached when the pending event of ``s`` fires."""
    if isinstance(s, VacancyRich):
        if s.vacancies == 0:
            return Depleted()
        return NvPresent(draw_axis(rng), s.vacancies - 1)
    if isinstance(s, NvPresent):
        return DarkIntermediate(s.axis, s.vacancies, _draw_dwell(cfg, rng))
    if isinstance(s, DarkIntermediate):
        if s.vacancies > 0:
            return NvPresent(draw_axis(rng), s.vacancies)
        return NvPresent(s.prior_axis, 0)
    raise ValueError(f"{s.kind} has no pending transition")


def step_pulse(
    s: SiteState,
    rng: np.random.Generator,
    cfg: KineticsConfig = KineticsConfig(),
    draw_axis: AxisDraw = uniform_axis,
) -> SiteState:
    """Apply one diffusion pulse."""
    if isinstance(s, VacancyRich):
        if s.vacancies == 0:
            return Depleted()
        if rng.random() < cfg.p_form:
            return _transition(s, cfg, rng, draw_axis)
        return s
    if isinstance(s, NvPresent):
        if rng.random() < cfg.p_dissociate:
            return _transition(s, cfg, rng, draw_axis)
        return s
    if isinstance(s, DarkIntermediate):
        if s.remaining_dwell <= 1:
            return _transition(s, cfg, rng, draw_axis)
        return replace(s, remaining_dwell=s.remaining_dwell - 1)
    return s


def pulses_to_next_event(s: SiteState, cfg: KineticsConfig, rng: np.random.Generator) -> Optional[int]:
    """Pulse index (1-based) of the next transition, or None if there is none."""
    if isinstance(s, VacancyRich):
        if s.vacancies == 0:
            return 1
        return int(rng.geometric(cfg.p_form)) if cfg.p_form > 0 else None
    if isinstance(s, NvPresent):
        return int(rng.geometric(cfg.p_dissociate)) if cfg.p_dissociate > 0 else None
    if isinstance(s, DarkIntermediate):
        return max(s.remaining_dwell, 1)
    return None


class SiteProcess:
    """One site under the pulse train, advanced in whole pulses.

    Holds the pulses remaining until the next transition so that long
    event-free stretches cost O(1).
    """

    __slots__ = ("state", "cfg", "rng", "draw_axis", "_pending")

    def __init__(
        self,
        state: SiteState,
        cfg: KineticsConfig,
        rng: np.random.Generator,
        draw_axis: AxisDraw = uniform_axis,
    ):
        self.state = state
        self.cfg = cfg
        self.rng = rng
        self.draw_axis = draw_axis
        self._pending: Optional[int] = None

    def set_state(self, state: SiteState) -> None:
        self.state = state
        self._pending = None

    def seed(self) -> SiteState:
        self.set_state(apply_seed(self.state, self.cfg))
        return self.state

    def advance(self, n_pulses: int) -> list[tuple[int, SiteState]]:
        """Apply ``n_pulses`` pulses; return (pulse offset, new state) per transition."""
        events = []
        done = 0
        while done < n_pulses:
            if self._pending is None:
                self._pending = pulses_to_next_event(self.state, self.cfg, self.rng)
                if self._pending is None:
                    break
            left = n_pulses - done
            if self._pending > left:
                self._pending -= left
                if isinstance(self.state, DarkIntermediate):
                    self.state = replace(self.state, remaining_dwell=self._pending)
                break
            done += self._pending
            self.state = _transition(self.state, self.cfg, self.rng, self.draw_axis)
            self._pending = None
            events.append((done, self.state))
        return events


@dataclass(frozen=True)
class Transition:
    t: float
    before: SiteState
    after: SiteState

    def to_dict(self) -> dict:
        return {"t": self.t, "from": state_to_dict(self.before), "to": state_to_dict(self.after)}


def simulate_train(
    s: SiteState,
    duration: float,
    rng: np.random.Generator,
    cfg: KineticsConfig = KineticsConfig(),
    t0: float = 0.0,
    draw_axis: AxisDraw = uniform_axis,
) -> tuple[SiteState, list[Transition]]:
    """Run the diffusion train for ``duration`` seconds.

    floor(duration * rate) pulses are applied; pulse k fires at t0 + k / rate.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rate = cfg.pulses.rate_hz
    n = int(math.floor(duration * rate + 1e-9))
    proc = SiteProcess(s, cfg, rng, draw_axis)
    trajectory = []
    before = s
    for k, after in proc.advance(n):
        trajectory.append(Transition(t0 + k / rate, before, after))
        before = after
    return proc.state, trajectory


def brightness(
    s: SiteState,
    theta: float,
    surface: SurfaceCut,
    emission: EmissionConfig = EmissionConfig(),
    cfg: KineticsConfig = KineticsConfig(),
) -> float:
    """Detected count rate behind an analyzer at ``theta``."""
    if isinstance(s, NvPresent):
        n = axis_in_lab(s.axis, surface)
        return cfg.background + cfg.brightness * normalized_value(n, theta, emission)
    return cfg.background
