from .bench import EventRecord, MockBench, ScannerModel, StageModel, bind_mock
from .eventlog import LogSchemaError, ReplayReport, bench_log, dumps, loads, replay, write_atomic
from .interfaces import Bench, BenchError
from .protocol import Command, ScriptError, parse_line, parse_script
from .script import CommandError, execute_script

__all__ = [
    "Bench",
    "BenchError",
    "Command",
    "CommandError",
    "EventRecord",
    "LogSchemaError",
    "MockBench",
    "ReplayReport",
    "ScannerModel",
    "ScriptError",
    "StageModel",
    "bench_log",
    "bind_mock",
    "dumps",
    "execute_script",
    "loads",
    "parse_line",
    "parse_script",
    "replay",
    "write_atomic",
]
