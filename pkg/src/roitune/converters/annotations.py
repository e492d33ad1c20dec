"""Normalized annotation types and their readers.

Every corpus enters through one of these: COCO-style JSON (read by
:func:`ingest_coco_json`) or a JSON-lines file in the normalized schema.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from ..errors import DanglingCategoryId, DegenerateBox, InputError, ParseError
from ..geometry import Box, ImageSize, validate_box
from ..records import InstructionRecord, iter_jsonl

log = logging.getLogger(__name__)

LABELS = "ABCD"


@dataclass(frozen=True)
class RegionEntry:
    box: Box
    text: str | None = None
    category: str | None = None


@dataclass(frozen=True)
class RegionAnnotation:
    image_id: str
    size: ImageSize
    entries: tuple[RegionEntry, ...]
    caption: str | None = None

    def to_json(self) -> dict:
        d = {
            "image_id": self.image_id,
            "width": self.size.width,
            "height": self.size.height,
            "entries": [{"box": list(e.box.as_tuple()), "text": e.text, "category": e.category}
                        for e in self.entries],
        }
        if self.caption is not None:
            d["caption"] = self.caption
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RegionAnnotation":
        try:
            size = ImageSize(int(d["width"]), int(d["height"]))
            entries = tuple(
                RegionEntry(validate_box(Box.of(e["box"]), size), e.get("text"), e.get("category"))
                for e in d.get("entries", []))
            return cls(str(d["image_id"]), size, entries, d.get("caption"))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad region annotation {d.get('image_id', '?')}: {exc}") from exc


@dataclass(frozen=True)
class ChoiceItem:
    question: str
    options: tuple[str, ...]
    label: str
    rationale_options: tuple[str, ...] = ()
    rationale_label: str | None = None


@dataclass(frozen=True)
class VcrItem:
    """One VCR question with its regions.

    ``answer``/``rationale`` are free-form texts that may carry
    ``<region{i}>`` placeholders; ``choice`` carries the multiple-choice view.
    """
    id: str
    image_id: str
    size: ImageSize
    regions: tuple[RegionEntry, ...]
    question: str
    answer: str | None = None
    rationale: str | None = None
    choice: ChoiceItem | None = None

    @classmethod
    def from_json(cls, d: dict) -> "VcrItem":
        try:
            size = ImageSize(int(d["width"]), int(d["height"]))
            regions = tuple(RegionEntry(validate_box(Box.of(r["box"]), size), None, r.get("category"))
                            for r in d.get("regions", []))
            choice = None
            if "answer_choices" in d:
                choice = ChoiceItem(d["question"], tuple(d["answer_choices"]), d.get("answer_label"),
                                    tuple(d.get("rationale_choices", ())), d.get("rationale_label"))
            answer, rationale = d.get("answer"), d.get("rationale")
            if answer is None and choice is not None and choice.label in LABELS[:len(choice.options)]:
                answer = choice.options[LABELS.index(choice.label)]
            if (rationale is None and choice is not None and choice.rationale_label
                    and choice.rationale_label in LABELS[:len(choice.rationale_options)]):
                rationale = choice.rationale_options[LABELS.index(choice.rationale_label)]
            return cls(str(d["id"]), str(d["image_id"]), size, regions, d["question"], answer, rationale, choice)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad VCR item {d.get('id', '?')}: {exc}") from exc


@dataclass(frozen=True)
class V7wItem:
    id: str
    image_id: str
    size: ImageSize
    question: str
    boxes: tuple[Box, ...]
    answer_index: int

    @classmethod
    def from_json(cls, d: dict) -> "V7wItem":
        try:
            size = ImageSize(int(d["width"]), int(d["height"]))
            return cls(str(d["id"]), str(d["image_id"]), size, d["question"],
                       tuple(validate_box(Box.of(b), size) for b in d["boxes"]), int(d["answer_index"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad Visual-7W item {d.get('id', '?')}: {exc}") from exc


@dataclass(frozen=True)
class Detection:
    box: Box
    class_name: str
    score: float | None = None


@dataclass(frozen=True)
class ChatItem:
    record: InstructionRecord
    size: ImageSize
    detections: tuple[Detection, ...]

    @classmethod
    def from_json(cls, d: dict) -> "ChatItem":
        try:
            w, h = d["image_size"]
            size = ImageSize(int(w), int(h))
            dets = tuple(Detection(Box.of(x["box"]), x["class_name"], x.get("score"))
                         for x in d.get("detections", []))
            return cls(InstructionRecord.from_json(d["record"]), size, dets)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad chat item: {exc}") from exc


@dataclass
class IngestStats:
    images: int = 0
    annotations: int = 0
    dropped_missing_image: int = 0
    dropped_degenerate: int = 0
    categories: list[str] = field(default_factory=list)


def _load_json(path) -> object:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("invalid UTF-8", exc.start, Path(path).name) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, len(text[:exc.pos].encode("utf-8")), Path(path).name) from exc


def ingest_coco_json(path, stats: IngestStats | None = None) -> Iterator[RegionAnnotation]:
    """Stream COCO-style ``images``/``annotations``/``categories`` as RegionAnnotations.

    Annotations naming an unknown image are dropped and counted; an unknown
    category id is an error. Boxes are converted from ``[x, y, w, h]``.
    """
    stats = stats if stats is not None else IngestStats()
    doc = _load_json(path)
    if not isinstance(doc, dict) or not all(k in doc for k in ("images", "annotations", "categories")):
        raise ParseError("expected an object with images, annotations and categories", 0, Path(path).name)
    cats = {int(c["id"]): str(c["name"]) for c in doc["categories"]}
    stats.categories = [cats[k] for k in sorted(cats)]
    images = {}
    for im in doc["images"]:
        images[im["id"]] = (str(im.get("file_name", im["id"])), ImageSize(int(im["width"]), int(im["height"])))
    per_image: dict = {k: [] for k in images}
    for ann in doc["annotations"]:
        stats.annotations += 1
        if ann["image_id"] not in images:
            stats.dropped_missing_image += 1
            log.warning("annotation %s references missing image %s", ann.get("id"), ann["image_id"])
            continue
        cid = int(ann["category_id"])
        if cid not in cats:
            raise DanglingCategoryId(f"annotation {ann.get('id')} uses unknown category id {cid}")
        size = images[ann["image_id"]][1]
        try:
            box = validate_box(Box.from_xywh(ann["bbox"]), size)
        except DegenerateBox:
            stats.dropped_degenerate += 1
            continue
        per_image[ann["image_id"]].append(RegionEntry(box, ann.get("caption"), cats[cid]))
    for image_key in images:
        stats.images += 1
        name, size = images[image_key]
        yield RegionAnnotation(str(image_key), size, tuple(per_image[image_key]))


def read_annotations(path) -> Iterator[RegionAnnotation]:
    for d in iter_jsonl(path):
        yield RegionAnnotation.from_json(d)


def write_annotations(path, anns) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in anns:
            fh.write(json.dumps(a.to_json(), ensure_ascii=False, separators=(",", ":")) + "\n")
