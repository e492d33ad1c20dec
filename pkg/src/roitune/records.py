"""InstructionRecord and its JSON-lines form."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

from .errors import InvalidRecord, MalformedPlaceholder, ParseError
from .geometry import Box

ROLES = ("system", "question", "answer")
MAX_REGIONS = 100
PLACEHOLDER_RE = re.compile(r"<region(\d*)>")


@dataclass(frozen=True)
class Turn:
    role: str
    text: str


@dataclass(frozen=True)
class Region:
    i: int
    box: Box


@dataclass(frozen=True)
class InstructionRecord:
    id: str
    image_id: str
    stage: int
    source: str
    regions: tuple[Region, ...] = ()
    conversation: tuple[Turn, ...] = ()
    # converter warnings; never serialized
    flags: tuple[str, ...] = field(default=(), compare=False)

    def region_boxes(self) -> dict[int, Box]:
        return {r.i: r.box for r in self.regions}

    def with_turns(self, turns) -> "InstructionRecord":
        return replace(self, conversation=tuple(turns))

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image_id": self.image_id,
            "stage": self.stage,
            "source": self.source,
            "regions": [{"i": r.i, "box": list(r.box.as_tuple())} for r in self.regions],
            "conversation": [{"role": t.role, "text": t.text} for t in self.conversation],
        }

    @classmethod
    def from_json(cls, d: dict) -> "InstructionRecord":
        try:
            return cls(
                id=str(d["id"]),
                image_id=str(d["image_id"]),
                stage=int(d["stage"]),
                source=str(d["source"]),
                regions=tuple(Region(int(r["i"]), Box.of(r["box"])) for r in d["regions"]),
                conversation=tuple(Turn(str(t["role"]), str(t["text"])) for t in d["conversation"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidRecord(f"bad record {d.get('id', '?') if isinstance(d, dict) else '?'}: {exc}") from exc


def placeholder_indices(text: str) -> list[int]:
    """Region indices of every ``<region{i}>`` in ``text``, in order of appearance."""
    out = []
    for m in PLACEHOLDER_RE.finditer(text):
        digits = m.group(1)
        if not digits or digits.startswith("0") or int(digits) > MAX_REGIONS:
            raise MalformedPlaceholder(f"malformed placeholder {m.group(0)!r}")
        out.append(int(digits))
    return out


def validate_record(rec: InstructionRecord) -> InstructionRecord:
    if rec.stage not in (1, 2):
        raise InvalidRecord(f"{rec.id}: stage must be 1 or 2, got {rec.stage}")
    seen = set()
    for r in rec.regions:
        if not 1 <= r.i <= MAX_REGIONS:
            raise InvalidRecord(f"{rec.id}: region index {r.i} out of range 1..{MAX_REGIONS}")
        if r.i in seen:
            raise InvalidRecord(f"{rec.id}: duplicate region index {r.i}")
        seen.add(r.i)
    missing = []
    for t in rec.conversation:
        if t.role not in ROLES:
            raise InvalidRecord(f"{rec.id}: unknown role {t.role!r}")
        missing.extend(i for i in placeholder_indices(t.text) if i not in seen and i not in missing)
    if missing:
        raise InvalidRecord(f"{rec.id}: placeholders without a region entry: {sorted(missing)}")
    return rec


def dumps(rec: InstructionRecord) -> str:
    return json.dumps(rec.to_json(), ensure_ascii=False, separators=(",", ":"))


def write_records(path, records: Iterable[InstructionRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")
            n += 1
    return n


def iter_jsonl(path) -> Iterator[dict]:
    """Yield each JSON object of a JSON-lines file; blank lines are skipped."""
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("utf-8")
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    col = len(line[:exc.pos].encode("utf-8"))
                    raise ParseError(exc.msg, offset + col, Path(path).name) from exc
            offset += len(raw)


def read_records(path) -> list[InstructionRecord]:
    return [validate_record(InstructionRecord.from_json(d)) for d in iter_jsonl(path)]
