"""Per-source reading and conversion, shared by the CLI and the verify suite."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import InputError
from ..records import InstructionRecord, iter_jsonl
from .annotations import ChatItem, IngestStats, RegionAnnotation, V7wItem, VcrItem, ingest_coco_json
from .convert import (
    STAGE_OF_SOURCE, augment_chat_with_boxes, convert_detection, convert_multi_region_caption,
    convert_refexp, convert_region_caption, convert_v7w, convert_vcr_chat, convert_vcr_choice,
)

log = logging.getLogger(__name__)

SOURCES = tuple(STAGE_OF_SOURCE)


@dataclass
class ConvertResult:
    records: list[InstructionRecord] = field(default_factory=list)
    skipped: int = 0
    flagged: int = 0
    stats: IngestStats | None = None


def load_items(source: str, path) -> tuple[list, IngestStats | None]:
    """Read ``path`` into the item type that ``source`` converts."""
    path = Path(path)
    if source not in STAGE_OF_SOURCE:
        raise InputError(f"unknown source {source!r}; expected one of {', '.join(SOURCES)}")
    if source == "coco":
        stats = IngestStats()
        return list(ingest_coco_json(path, stats)), stats
    parse = {
        "refexp": RegionAnnotation.from_json, "vg": RegionAnnotation.from_json,
        "flickr": RegionAnnotation.from_json, "vcr-chat": VcrItem.from_json,
        "vcr-choice": VcrItem.from_json, "v7w": V7wItem.from_json, "chat-augment": ChatItem.from_json,
    }[source]
    return [parse(d) for d in iter_jsonl(path)], None


def convert_one(source: str, item, seed: int, mode: str = "QA", cap: int = 100, categories=()):
    if source == "coco":
        return convert_detection(item, categories, seed)
    if source == "refexp":
        return convert_refexp(item)
    if source == "vg":
        return convert_region_caption(item, seed)
    if source == "flickr":
        return convert_multi_region_caption(item, seed)
    if source == "vcr-chat":
        return convert_vcr_chat(item, seed)
    if source == "vcr-choice":
        return convert_vcr_choice(item, mode)
    if source == "v7w":
        return convert_v7w(item, seed)
    if source == "chat-augment":
        return augment_chat_with_boxes(item, cap)
    raise InputError(f"unknown source {source!r}")


def convert_file(source: str, path, seed: int, mode: str = "QA", cap: int = 100, jobs: int = 1) -> ConvertResult:
    """Convert every item of one input file; output is sorted by record id.

    Each item draws from its own generator, so the result does not depend
    on ``jobs``.
    """
    items, stats = load_items(source, path)
    categories = stats.categories if stats else ()

    def work(item):
        return convert_one(source, item, seed, mode, cap, categories)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outs = list(pool.map(work, items))
    else:
        outs = [work(it) for it in items]
    res = ConvertResult(stats=stats)
    for out in outs:
        if out is None:
            res.skipped += 1
            continue
        if out.flags:
            res.flagged += 1
            for f in out.flags:
                log.warning("%s: %s", out.id, f)
        res.records.append(out)
    res.records.sort(key=lambda r: r.id)
    return res


def load_manifest(fixture_dir) -> dict:
    p = Path(fixture_dir) / "manifest.json"
    if not p.exists():
        return {"cases": [], "banks": {}}
    return json.loads(p.read_text(encoding="utf-8"))


def fixture_dir() -> Path:
    return Path(__file__).resolve().parent.parent / "fixtures"
