"""Append-only record of pipeline stages and the artifacts they read and wrote.

One JSON object per line. Artifacts are identified by a path relative to the
run directory and a content hash (a file's sha256, or for a directory the
sha256 of its sorted ``relpath\\tsha256`` listing). User-supplied inputs are
recorded separately as sources; every artifact a stage consumes must have
been produced, with the same hash, by an earlier stage.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from .core import sha256_file
from .errors import IntegrityError, LoadError

LEDGER_NAME = "ledger.jsonl"


def artifact_hash(path) -> str:
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    if path.is_dir():
        h = hashlib.sha256()
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f"{f.relative_to(path).as_posix()}\t{sha256_file(f)}\n".encode("utf-8"))
        return h.hexdigest()
    raise IntegrityError(f"artifact {path} does not exist", path=str(path))


@dataclass
class StageRecord:
    stage: str
    config_hash: str
    inputs: dict[str, str] = field(default_factory=dict)  # produced artifacts consumed: relpath -> hash
    sources: dict[str, str] = field(default_factory=dict)  # user-supplied files: path -> hash
    outputs: dict[str, str] = field(default_factory=dict)
    started: float = 0.0
    finished: float = 0.0
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class RunLedger:
    def __init__(self, run_dir, records: Optional[list[StageRecord]] = None):
        self.run_dir = Path(run_dir)
        self.records: list[StageRecord] = list(records or [])

    @property
    def path(self) -> Path:
        return self.run_dir / LEDGER_NAME

    @classmethod
    def open(cls, run_dir) -> "RunLedger":
        run_dir = Path(run_dir)
        f = run_dir / LEDGER_NAME
        records = []
        if f.exists():
            for n, line in enumerate(f.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    records.append(StageRecord(**json.loads(line)))
                except (ValueError, TypeError) as e:
                    raise LoadError(f"{f}:{n}: malformed ledger record: {e}") from e
        return cls(run_dir, records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def rel(self, path) -> str:
        path = Path(path)
        try:
            return path.resolve().relative_to(self.run_dir.resolve()).as_posix()
        except ValueError:
            return str(path)

    def latest_output(self, relpath: str) -> Optional[str]:
        for rec in reversed(self.records):
            if relpath in rec.outputs:
                return rec.outputs[relpath]
        return None

    def check_inputs(self, inputs: Mapping[str, str]) -> None:
        """Every consumed artifact must match an earlier stage's output."""
        for rel, digest in inputs.items():
            produced = {rec.outputs[rel] for rec in self.records if rel in rec.outputs}
            if digest not in produced:
                why = "was never produced by a recorded stage" if not produced else "changed since it was produced"
                raise IntegrityError(f"input artifact {rel} {why}", path=rel)

    def append(self, record: StageRecord) -> StageRecord:
        self.check_inputs(record.inputs)
        self.records.append(record)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(record.to_json() + "\n")
        return record

    def is_dag(self) -> bool:
        seen: dict[str, set[str]] = {}
        for rec in self.records:
            for rel, digest in rec.inputs.items():
                if digest not in seen.get(rel, set()):
                    return False
            for rel, digest in rec.outputs.items():
                seen.setdefault(rel, set()).add(digest)
        return True


class StageRun:
    """Collects hashes for one stage; ``commit`` appends the record."""

    def __init__(self, ledger: RunLedger, stage: str, config_hash: str):
        self.ledger = ledger
        self.record = StageRecord(stage, config_hash, started=time.time())

    def input(self, path) -> Path:
        """Record a consumed artifact; it must match an earlier stage's output."""
        path = Path(path)
        entry = {self.ledger.rel(path): artifact_hash(path)}
        self.ledger.check_inputs(entry)
        self.record.inputs.update(entry)
        return path

    def source(self, path) -> Path:
        path = Path(path)
        self.record.sources[str(path)] = artifact_hash(path)
        return path

    def output(self, path) -> Path:
        path = Path(path)
        self.record.outputs[self.ledger.rel(path)] = artifact_hash(path)
        return path

    def commit(self, **details) -> StageRecord:
        self.record.finished = time.time()
        self.record.details.update(details)
        return self.ledger.append(self.record)
