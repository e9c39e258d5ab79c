"""Instrument interfaces the controller talks to.

Real drivers would implement these; the package ships only the mock bench.
"""
from __future__ import annotations

from typing import Protocol

from ..photonics import ConfocalImage


class Stage(Protocol):
    def move_to(self, x: float, y: float, z: float) -> tuple[float, float, float]: ...

    def position(self) -> tuple[float, float, float]: ...


class HwpRotator(Protocol):
    def set_angle(self, angle: float) -> None: ...

    def angle(self) -> float: ...


class PulseGate(Protocol):
    def seed_pulse(self) -> None: ...

    def train_on(self) -> None: ...

    def train_off(self) -> None: ...

    def train_active(self) -> bool: ...


class PhotonCounter(Protocol):
    def acquire(self, dwell: float) -> int: ...


class Scanner(Protocol):
    def scan(self, region: tuple[float, float, float, float], pitch: float) -> ConfocalImage: ...


class Bench(Stage, HwpRotator, PulseGate, PhotonCounter, Scanner, Protocol):
    """Everything one fabrication station exposes, plus a clock and an event sink."""

    @property
    def time(self) -> float: ...

    def note(self, event: str, data: dict | None = None) -> None: ...


class BenchError(RuntimeError):
    """A bench command could not be carried out."""
