"""Annotation -> InstructionRecord conversions, one function per task format."""
from __future__ import annotations

import re
from typing import Sequence

from ..errors import (
    BadOptionCount, DegenerateBox, EmptyCaption, InvalidRecord, MissingCategory, TooFewRegions,
    UnknownCategory,
)
from ..geometry import validate_box
from ..records import PLACEHOLDER_RE, MAX_REGIONS, InstructionRecord, Region, Turn, validate_record
from .annotations import LABELS, ChatItem, RegionAnnotation, V7wItem, VcrItem
from .rng import item_rng
from .templates import (
    CHOICE_PREAMBLE, DETECTION_PROMPT, MAY_FEATURE, MULTI_BANK, QA_PROMPT, QAR_PROMPT, RATIONALE_QUESTION,
    REFEXP_PROMPT, SINGLE_BANK, VCR_BANK, VCR_DECLARATION, TemplateBank, fill_multi, fill_single,
)

STAGE_OF_SOURCE = {
    "coco": 1, "refexp": 1,
    "vg": 2, "flickr": 2, "vcr-chat": 2, "vcr-choice": 2, "v7w": 2, "chat-augment": 2,
}
SHORT_TEXT_WORDS = 5


def _record(rid, image_id, source, regions, turns, flags=()):
    return validate_record(InstructionRecord(rid, image_id, STAGE_OF_SOURCE[source], source,
                                             tuple(regions), tuple(turns), tuple(flags)))


def _pairs(entries, order, payload):
    regions, turns = [], []
    for i, k in enumerate(order, start=1):
        regions.append(Region(i, entries[k].box))
        turns += [Turn("question", f"<region{i}>"), Turn("answer", payload(entries[k]))]
    return regions, turns


def convert_detection(ann: RegionAnnotation, categories: Sequence[str], seed: int) -> InstructionRecord | None:
    """Stage-1 detection record: task prompt, then ``<region{i}> category`` pairs.

    Regions are shuffled with the item's seeded generator. Images without
    boxes produce no record.
    """
    if not ann.entries:
        return None
    known = set(categories)
    for e in ann.entries:
        if e.category not in known:
            raise UnknownCategory(f"image {ann.image_id}: category {e.category!r} not in the category list")
    rid = f"coco-{ann.image_id}"
    order = list(range(len(ann.entries)))
    item_rng(seed, rid).shuffle(order)
    regions, turns = _pairs(ann.entries, order, lambda e: e.category)
    prompt = DETECTION_PROMPT.format(categories=", ".join(categories))
    return _record(rid, ann.image_id, "coco", regions, [Turn("question", prompt)] + turns)


def convert_refexp(ann: RegionAnnotation) -> InstructionRecord | None:
    """Stage-1 referring-expression record; long expressions are flagged, not dropped."""
    if not ann.entries:
        return None
    regions, turns = _pairs(ann.entries, range(len(ann.entries)), lambda e: (e.text or "").strip())
    flags = [f"long-expression:region{i}" for i, e in enumerate(ann.entries, start=1)
             if len((e.text or "").split()) > SHORT_TEXT_WORDS]
    return _record(f"refexp-{ann.image_id}", ann.image_id, "refexp", regions,
                   [Turn("question", REFEXP_PROMPT)] + turns, flags)


def convert_region_caption(ann: RegionAnnotation, seed: int, bank: TemplateBank = SINGLE_BANK) -> InstructionRecord | None:
    if not ann.entries:
        return None
    rid = f"vg-{ann.image_id}"
    rng = item_rng(seed, rid)
    regions, turns = [], []
    for i, e in enumerate(ann.entries, start=1):
        caption = (e.text or "").strip()
        if not caption:
            raise EmptyCaption(f"image {ann.image_id}: region {i} has no caption")
        regions.append(Region(i, e.box))
        turns += [Turn("question", fill_single(bank[rng.below(len(bank))], i)), Turn("answer", caption)]
    return _record(rid, ann.image_id, "vg", regions, turns)


def convert_multi_region_caption(ann: RegionAnnotation, seed: int,
                                 bank: TemplateBank = MULTI_BANK) -> InstructionRecord:
    k = len(ann.entries)
    if k < 2:
        raise TooFewRegions(f"image {ann.image_id}: multi-region caption needs >= 2 boxes, got {k}")
    caption = (ann.caption or "").strip()
    if not caption:
        raise EmptyCaption(f"image {ann.image_id}: no caption")
    rid = f"flickr-{ann.image_id}"
    template = bank[item_rng(seed, rid).below(len(bank))]
    regions = [Region(i, e.box) for i, e in enumerate(ann.entries, start=1)]
    turns = [Turn("question", fill_multi(template, range(1, k + 1))), Turn("answer", caption)]
    return _record(rid, ann.image_id, "flickr", regions, turns)


def substitute_categories(text: str, categories: dict[int, str | None]) -> str:
    """Replace each ``<region{i}>`` by ``{category} at region{i}``.

    A replacement at the very start of the text is capitalised.
    """
    def sub(m):
        i = int(m.group(1))
        cat = categories.get(i)
        if not cat:
            raise MissingCategory(f"<region{i}> has no category name")
        phrase = f"{cat} at region{i}"
        return phrase[0].upper() + phrase[1:] if m.start() == 0 else phrase

    return PLACEHOLDER_RE.sub(sub, text)


def region_declaration(k: int) -> str:
    return VCR_DECLARATION.format(regions=", ".join(f"<region{i}>" for i in range(1, k + 1)))


def convert_vcr_chat(item: VcrItem, seed: int, bank: TemplateBank = VCR_BANK) -> InstructionRecord:
    """Two-round VCR chat: question -> answer, follow-up -> rationale.

    The conversation opens with a sentence declaring every region so later
    turns can refer to them in plain text.
    """
    if item.answer is None or item.rationale is None:
        raise InvalidRecord(f"VCR item {item.id}: chat conversion needs answer and rationale texts")
    rid = f"vcr-chat-{item.id}"
    cats = {i: e.category for i, e in enumerate(item.regions, start=1)}
    answer = substitute_categories(item.answer.strip(), cats)
    rationale = substitute_categories(item.rationale.strip(), cats)
    follow_up = bank[item_rng(seed, rid).below(len(bank))]
    turns = []
    if item.regions:
        turns.append(Turn("system", region_declaration(len(item.regions))))
    turns += [Turn("question", item.question.strip()), Turn("answer", answer),
              Turn("question", follow_up), Turn("answer", rationale)]
    regions = [Region(i, e.box) for i, e in enumerate(item.regions, start=1)]
    return _record(rid, item.image_id, "vcr-chat", regions, turns)


def _choice_header(k: int, prompt: str) -> str:
    return f"{','.join(f'<region{i}>' for i in range(1, k + 1))} {CHOICE_PREAMBLE} {prompt}"


def _options(options) -> str:
    return "\n".join(f"({LABELS[j]}),{opt}" for j, opt in enumerate(options))


def _tidy_punctuation(text: str) -> str:
    return re.sub(r"\s+([.,!?])", r"\1", text.strip())


def convert_vcr_choice(item: VcrItem, mode: str = "QA") -> InstructionRecord:
    """Downstream VCR prompt: Q->A picks the answer, QA->R picks the rationale."""
    c = item.choice
    if c is None or len(c.options) != 4:
        raise BadOptionCount(f"VCR item {item.id}: need 4 answer options, got {0 if c is None else len(c.options)}")
    if c.label not in LABELS:
        raise InvalidRecord(f"VCR item {item.id}: answer label {c.label!r} not in A-D")
    k = len(item.regions)
    if mode == "QA":
        text = f"{_choice_header(k, QA_PROMPT)}\n{c.question}\n{_options(c.options)}"
        target = c.label
    elif mode == "QAR":
        if len(c.rationale_options) != 4:
            raise BadOptionCount(f"VCR item {item.id}: need 4 rationale options, got {len(c.rationale_options)}")
        if c.rationale_label not in LABELS:
            raise InvalidRecord(f"VCR item {item.id}: rationale label {c.rationale_label!r} not in A-D")
        chosen = _tidy_punctuation(c.options[LABELS.index(c.label)])
        text = (f"{_choice_header(k, QAR_PROMPT)}\n\"{c.question}\" The answer is \"{chosen}\" "
                f"{RATIONALE_QUESTION}\n{_options(c.rationale_options)}")
        target = c.rationale_label
    else:
        raise InvalidRecord(f"unknown VCR choice mode {mode!r}")
    regions = [Region(i, e.box) for i, e in enumerate(item.regions, start=1)]
    return _record(f"vcr-choice-{item.id}-{mode}", item.image_id, "vcr-choice", regions,
                   [Turn("question", text), Turn("answer", f"({target})")])


def convert_v7w(item: V7wItem, seed: int) -> InstructionRecord:
    """Pointing question over four candidate boxes, shuffled per item."""
    if len(item.boxes) != 4:
        raise BadOptionCount(f"Visual-7W item {item.id}: need 4 candidate boxes, got {len(item.boxes)}")
    if not 0 <= item.answer_index < 4:
        raise InvalidRecord(f"Visual-7W item {item.id}: answer index {item.answer_index} out of range")
    rid = f"v7w-{item.id}"
    order = [0, 1, 2, 3]
    item_rng(seed, rid).shuffle(order)
    regions = [Region(i, item.boxes[k]) for i, k in enumerate(order, start=1)]
    target = LABELS[order.index(item.answer_index)]
    text = f"{_choice_header(4, QA_PROMPT)}\n{item.question}"
    return _record(rid, item.image_id, "v7w", regions, [Turn("question", text), Turn("answer", f"({target})")])


def augment_chat_with_boxes(item: ChatItem, cap: int = MAX_REGIONS) -> InstructionRecord:
    """Declare detector boxes at the top of the first question.

    Boxes are taken in the given (score-descending) order up to ``cap``;
    boxes that are degenerate inside the image are skipped and flagged.
    """
    rec = item.record
    if rec.regions:
        raise InvalidRecord(f"{rec.id}: chat record already has regions")
    cap = min(cap, MAX_REGIONS)
    kept, flags = [], []
    for det in item.detections:
        if len(kept) == cap:
            break
        try:
            kept.append((validate_box(det.box, item.size), det.class_name))
        except DegenerateBox:
            flags.append(f"degenerate-detection:{det.class_name}")
    turns = list(rec.conversation)
    if kept:
        lines = [MAY_FEATURE.format(i=i, class_name=name) for i, (_, name) in enumerate(kept, start=1)]
        first_q = next((j for j, t in enumerate(turns) if t.role == "question"), None)
        if first_q is None:
            raise InvalidRecord(f"{rec.id}: chat record has no question turn")
        turns[first_q] = Turn("question", "\n".join(lines + [turns[first_q].text]))
    regions = [Region(i, box) for i, (box, _) in enumerate(kept, start=1)]
    # source tag is kept so a box-free item passes through with only its stage changed
    return validate_record(InstructionRecord(rec.id, rec.image_id, STAGE_OF_SOURCE["chat-augment"], rec.source,
                                             tuple(regions), tuple(turns), tuple(flags)))
