from __future__ import annotations

from typing import Iterable

from .bench import EventRecord, MockBench
from .eventlog import bench_log
from .interfaces import BenchError
from .protocol import parse_script


class CommandError(RuntimeError):
    def __init__(self, lineno: int, command: str, message: str):
        super().__init__(f"line {lineno}: {command}: {message}")
        self.lineno = lineno


def execute_script(bench: MockBench, lines: Iterable[str] | str) -> list[EventRecord]:
    """Run a command script against ``bench`` and return its full event log.

    The script is parsed completely first, so a syntax error anywhere leaves
    the bench untouched.
    """
    commands = parse_script(lines)
    for lineno, cmd in commands:
        try:
            bench.execute(cmd)
        except BenchError as exc:
            raise CommandError(lineno, cmd.render(), str(exc)) from None
    return bench_log(bench)
