"""Line-oriented bench command language.

One command per line, uppercase verb, space separated decimal arguments::

    MOVE x y z
    HWP angle_rad
    SEED
    TRAIN ON | TRAIN OFF
    ACQ dwell_s
    SCAN x0 y0 x1 y1 pitch

Blank lines and ``#`` comments are ignored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

ARITY = {"MOVE": 3, "HWP": 1, "SEED": 0, "TRAIN": 1, "ACQ": 1, "SCAN": 5}
VERBS = tuple(ARITY)


class ScriptError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Command:
    verb: str
    args: tuple = ()

    def render(self) -> str:
        if self.verb == "TRAIN":
            return f"TRAIN {self.args[0]}"
        return " ".join([self.verb, *(repr(float(a)) for a in self.args)])


def parse_line(line: str, lineno: int = 1) -> Command | None:
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    verb, *rest = text.split()
    if verb not in ARITY:
        raise ScriptError(lineno, f"unknown command {verb!r}")
    if len(rest) != ARITY[verb]:
        raise ScriptError(lineno, f"{verb} takes {ARITY[verb]} argument(s), got {len(rest)}")
    if verb == "TRAIN":
        if rest[0] not in ("ON", "OFF"):
            raise ScriptError(lineno, "TRAIN expects ON or OFF")
        return Command(verb, (rest[0],))
    values = []
    for tok in rest:
        try:
            v = float(tok)
        except ValueError:
            raise ScriptError(lineno, f"{verb}: {tok!r} is not a number") from None
        if not math.isfinite(v):
            raise ScriptError(lineno, f"{verb}: {tok!r} is not finite")
        values.append(v)
    return Command(verb, tuple(values))


def parse_script(lines: Iterable[str] | str) -> list[tuple[int, Command]]:
    """Parse a whole script before anything runs; returns (line number, command)."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    out = []
    for lineno, line in enumerate(lines, start=1):
        cmd = parse_line(line, lineno)
        if cmd is not None:
            out.append((lineno, cmd))
    return out
