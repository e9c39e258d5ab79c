"""JSONL event logs and their replay against a fresh bench.

Line 1 is a header record carrying the schema version and everything needed
to rebuild the bench. Command records (MOVE, HWP, SEED, TRAIN, ACQ, SCAN)
store their arguments plus what was observed; any other event name is
controller bookkeeping and is not re-executed.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..config import from_dict
from ..emission import EmissionConfig
from ..kinetics import KineticsConfig
from .bench import EventRecord, MockBench, ScannerModel, StageModel
from .interfaces import BenchError
from .protocol import ARITY, Command

SCHEMA = "nvorient.eventlog/1"
HEADER = "header"


class LogSchemaError(ValueError):
    pass


def header_record(bench: MockBench) -> EventRecord:
    return EventRecord(0.0, HEADER, None, {"schema": SCHEMA, "bench": bench.header()})


def dumps(records: Iterable[EventRecord]) -> str:
    lines = [json.dumps(r.to_json_obj(), separators=(",", ":")) for r in records]
    return "".join(line + "\n" for line in lines)


def bench_log(bench: MockBench) -> list[EventRecord]:
    return [header_record(bench), *bench.records]


def write_atomic(path, data, binary: bool = False) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb" if binary else "w", **({} if binary else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check(cond: bool, lineno: int, message: str) -> None:
    if not cond:
        raise LogSchemaError(f"line {lineno}: {message}")


def loads(text: str) -> list[EventRecord]:
    """Parse and validate a JSONL log."""
    records = []
    last_t = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogSchemaError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        _check(isinstance(obj, dict), lineno, "record is not an object")
        _check(set(obj) == {"t", "event", "site", "data"}, lineno, "record keys must be t, event, site, data")
        t, event, site, data = obj["t"], obj["event"], obj["site"], obj["data"]
        _check(isinstance(t, (int, float)) and not isinstance(t, bool), lineno, "t must be a number")
        _check(isinstance(event, str), lineno, "event must be a string")
        _check(
            site is None
            or (isinstance(site, list) and len(site) == 2 and all(isinstance(v, int) for v in site)),
            lineno,
            "site must be null or [i, j]",
        )
        _check(isinstance(data, dict), lineno, "data must be an object")
        if not records:
            _check(event == HEADER and data.get("schema") == SCHEMA, lineno, f"first record must be a {SCHEMA} header")
        if last_t is not None:
            _check(t >= last_t, lineno, "timestamps must be non-decreasing")
        if event in ARITY:
            _check(isinstance(data.get("args", []), list), lineno, "args must be a list")
        last_t = t
        records.append(EventRecord(float(t), event, site, data))
    return records


def bench_from_header(data: dict, record: bool = False) -> MockBench:
    cfg = data["bench"]
    return MockBench(
        kinetics=from_dict(KineticsConfig, cfg["kinetics"]),
        emission=from_dict(EmissionConfig, cfg["emission"]),
        seed=cfg["seed"],
        surface=cfg["surface"],
        stage=from_dict(StageModel, cfg.get("stage", {})),
        scanner=from_dict(ScannerModel, cfg.get("scanner", {})),
        axis_script=cfg.get("axis_script", ()),
        record=record,
    )


def record_to_command(rec: EventRecord) -> Command:
    args = rec.data.get("args", [])
    if rec.event == "TRAIN":
        return Command("TRAIN", (args[0],))
    return Command(rec.event, tuple(float(a) for a in args))


@dataclass
class Divergence:
    index: int
    event: str
    field: str
    expected: object
    actual: object

    def __str__(self) -> str:
        return f"record {self.index} ({self.event}): {self.field} expected {self.expected!r}, got {self.actual!r}"


@dataclass
class ReplayReport:
    checked: int = 0
    divergence: Optional[Divergence] = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.divergence is None and not self.error


def replay(records: list[EventRecord]) -> ReplayReport:
    """Re-execute every command on a fresh bench and compare observables."""
    report = ReplayReport()
    if not records:
        return report
    head = records[0]
    if head.event != HEADER or head.data.get("schema") != SCHEMA:
        raise LogSchemaError("log does not start with a header record")
    bench = bench_from_header(head.data)
    for index, rec in enumerate(records[1:], start=1):
        if rec.event not in ARITY:
            continue
        bench.site_label = tuple(rec.site) if rec.site else None
        if rec.t != bench.time:
            report.divergence = Divergence(index, rec.event, "t", rec.t, bench.time)
            return report
        try:
            result = bench.execute(record_to_command(rec))
        except (BenchError, TypeError, IndexError, ValueError) as exc:
            report.error = f"record {index} ({rec.event}): {exc}"
            return report
        report.checked += 1
        observed = _observed(rec.event, result, bench)
        for key, actual in observed.items():
            expected = rec.data.get(key)
            if expected != actual:
                report.divergence = Divergence(index, rec.event, key, expected, actual)
                return report
    return report


def _observed(event: str, result, bench: MockBench) -> dict:
    if event == "ACQ":
        return {"counts": result, "theta": bench.analyzer_angle}
    if event == "MOVE":
        return {"position": list(result)}
    if event == "HWP":
        return {"theta": bench.analyzer_angle}
    if event == "SCAN":
        from .bench import image_digest

        return {"shape": list(result.data.shape), "sha256": image_digest(result)}
    return {}
