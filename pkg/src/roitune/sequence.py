"""Turning an InstructionRecord into an interleaved embedding sequence.

The record is rendered into typed text segments (questions, answers, stop
strings, framing), each segment is tokenized on its own, and the resulting
token stream is embedded with the ``<image>`` and ``<region{i}>`` positions
overwritten by the image and region vectors.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import torch

from .errors import (
    DuplicateImageSlot, InvalidRecord, MalformedPlaceholder, MissingImageEmbedding,
    MissingRegionEmbedding, SequenceTooShort, UnterminatedAnswer,
)
from .records import MAX_REGIONS, PLACEHOLDER_RE, InstructionRecord, Turn, placeholder_indices

IMAGE_TOKEN = "<image>"
STOP_TOKEN = "###"
BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"
IMAGE_PREFIX = "The <image> provides an overview of the picture."
IGNORE_INDEX = -100

# provenance codes; region i is stored as REGION_BASE + i
TEXT, IMAGE = 0, 1
REGION_BASE = 1

# stage-1 separator between a region answer and the next region, by source
STAGE1_PAIR_SEPARATOR = {"coco": ",\n"}


def region_token(i: int) -> str:
    return f"<region{i}>"


# longest first so <region100> wins over <region10> and <region1>
_TEXT_SPECIALS = [IMAGE_TOKEN, STOP_TOKEN] + [region_token(i) for i in range(1, MAX_REGIONS + 1)]
SPECIAL_RE = re.compile("|".join(re.escape(t) for t in sorted(_TEXT_SPECIALS, key=len, reverse=True)))


# ---------------------------------------------------------------- text rewrites

def rewrite_references(text: str) -> str:
    """Put the plain word ``region{i}`` in front of every ``<region{i}>``.

    Placeholders already preceded by that word are left alone, so the
    rewrite is idempotent. Nothing but the inserted words changes.
    """
    placeholder_indices(text)  # validates
    out = []
    last = 0
    for m in PLACEHOLDER_RE.finditer(text):
        word = f"region{m.group(1)}"
        before = "".join(out) + text[last:m.start()]
        out.append(text[last:m.start()])
        if not before.rstrip().endswith(word):
            out.append(word + " ")
        out.append(m.group(0))
        last = m.end()
    out.append(text[last:])
    return "".join(out)


def prepend_prefix(record: InstructionRecord) -> InstructionRecord:
    if any(IMAGE_TOKEN in t.text for t in record.conversation):
        raise DuplicateImageSlot(f"{record.id}: record already contains {IMAGE_TOKEN}")
    return record.with_turns((Turn("system", IMAGE_PREFIX),) + record.conversation)


def normalize_whitespace(text: str) -> str:
    """Canonical spacing: specials stand alone, whitespace runs collapse to one space."""
    return " ".join(SPECIAL_RE.sub(lambda m: f" {m.group(0)} ", text).split())


# ---------------------------------------------------------------- vocabulary

def _byte_token(b: int) -> str:
    return f"<0x{b:02X}>"


class Vocab:
    """Token strings and ids.

    Layout: begin/end markers, ``<image>``, ``###``, ``<region1>`` ..
    ``<region100>``, 256 byte tokens, then words in sorted order.
    """

    def __init__(self, words: Iterable[str] = ()):
        self.specials = [BOS_TOKEN, EOS_TOKEN, IMAGE_TOKEN, STOP_TOKEN] + [
            region_token(i) for i in range(1, MAX_REGIONS + 1)]
        self.byte_tokens = [_byte_token(b) for b in range(256)]
        reserved = set(self.specials) | set(self.byte_tokens)
        self.words = sorted({w for w in words if w and not any(ch.isspace() for ch in w)} - reserved)
        self.tokens = self.specials + self.byte_tokens + self.words
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        self._byte_base = len(self.specials)
        self._word_base = self._byte_base + 256

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._ids[token]

    def word_id(self, word: str) -> int | None:
        i = self._ids.get(word)
        return i if i is not None and i >= self._word_base else None

    def byte_id(self, b: int) -> int:
        return self._byte_base + b

    def is_byte(self, i: int) -> bool:
        return self._byte_base <= i < self._word_base

    def region_of(self, i: int) -> int | None:
        """Region index for a ``<region{i}>`` id, else None."""
        first = self._ids[region_token(1)]
        return i - first + 1 if first <= i < first + MAX_REGIONS else None

    @property
    def image_id(self) -> int:
        return self._ids[IMAGE_TOKEN]

    @property
    def stop_id(self) -> int:
        return self._ids[STOP_TOKEN]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS_TOKEN]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").split())

    @classmethod
    def from_records(cls, records: Iterable[InstructionRecord]) -> "Vocab":
        words = set(IMAGE_PREFIX.split())
        for rec in records:
            for seg in render_segments(rec):
                words.update(SPECIAL_RE.sub(" ", seg.text).split())
        return cls(words)


def tokenize(text: str, v: Vocab) -> list[int]:
    """Specials first, then whitespace-separated words, bytes for unknown words.

    Two unknown words in a row are separated by the space byte so they stay
    distinguishable after detokenization.
    """
    ids: list[int] = []
    pos = 0
    for m in SPECIAL_RE.finditer(text):
        _tokenize_plain(text[pos:m.start()], v, ids)
        ids.append(v.id(m.group(0)))
        pos = m.end()
    _tokenize_plain(text[pos:], v, ids)
    return ids


def _tokenize_plain(chunk: str, v: Vocab, ids: list[int]) -> None:
    prev_bytes = False
    for word in chunk.split():
        wid = v.word_id(word)
        if wid is not None:
            ids.append(wid)
            prev_bytes = False
            continue
        if prev_bytes:
            ids.append(v.byte_id(0x20))
        ids.extend(v.byte_id(b) for b in word.encode("utf-8"))
        prev_bytes = True


def detokenize(ids: Sequence[int], v: Vocab) -> str:
    pieces: list[str] = []
    buf = bytearray()
    for i in ids:
        if v.is_byte(i):
            buf.append(i - v.byte_id(0))
            continue
        if buf:
            pieces.append(buf.decode("utf-8", errors="replace"))
            buf.clear()
        pieces.append(v.tokens[i])
    if buf:
        pieces.append(buf.decode("utf-8", errors="replace"))
    return " ".join(pieces)


# ---------------------------------------------------------------- rendering

@dataclass(frozen=True)
class Segment:
    text: str
    kind: str  # system | question | answer | header | stop | sep


def _clean_answer(text: str) -> str:
    text = text.strip()
    if text.endswith(STOP_TOKEN):
        text = text[: -len(STOP_TOKEN)].rstrip()
    return text


def render_segments(record: InstructionRecord, rewrite: bool = False) -> list[Segment]:
    """Typed text pieces whose concatenation is the record's training text.

    Stage 2 uses ``### Question:`` / ``### Answer:`` framing; the ``###``
    following an answer is that answer's stop string. Stage 1 concatenates
    ``<region{i}> answer`` pairs after the task prompt.
    """
    turns = [Turn(t.role, rewrite_references(t.text) if rewrite and t.role != "answer" else t.text)
             for t in record.conversation]
    return _render_stage1(record, turns) if record.stage == 1 else _render_stage2(turns)


def _render_stage1(record, turns):
    pair_sep = STAGE1_PAIR_SEPARATOR.get(record.source, "\n")
    segs = []
    prev = None
    for t in turns:
        if prev is not None:
            if prev == "question" and t.role == "answer":
                segs.append(Segment(" ", "sep"))
            elif prev == "answer" and t.role == "question":
                segs.append(Segment(pair_sep, "sep"))
            else:
                segs.append(Segment("\n", "sep"))
        text = _clean_answer(t.text) if t.role == "answer" else t.text
        segs.append(Segment(text, t.role))
        prev = t.role
    return segs


def _render_stage2(turns):
    segs = []
    prev = None
    for t in turns:
        if t.role == "system":
            segs += [Segment(t.text, "system"), Segment("\n", "sep")]
        else:
            label = " Question: " if t.role == "question" else " Answer: "
            text = _clean_answer(t.text) if t.role == "answer" else t.text
            segs += [Segment(STOP_TOKEN, "stop" if prev == "answer" else "header"),
                     Segment(label, "header"), Segment(text, t.role), Segment("\n", "sep")]
        prev = t.role
    if turns:
        segs.append(Segment(STOP_TOKEN, "stop" if prev == "answer" else "header"))
    return segs


def render_text(record: InstructionRecord, rewrite: bool = False) -> str:
    return "".join(s.text for s in render_segments(record, rewrite))


@dataclass
class Rendered:
    ids: list[int]
    kinds: list[str]
    text: str


def render_tokens(record: InstructionRecord, v: Vocab) -> Rendered:
    """Token ids of the rewritten record, each tagged with its segment kind."""
    ids, kinds = [v.bos_id], ["bos"]
    segs = render_segments(record, rewrite=True)
    for seg in segs:
        toks = tokenize(seg.text, v)
        ids += toks
        kinds += [seg.kind] * len(toks)
    return Rendered(ids, kinds, "".join(s.text for s in segs))


def provenance_codes(ids: Sequence[int], v: Vocab) -> list[int]:
    out = []
    for i in ids:
        if i == v.image_id:
            out.append(IMAGE)
        else:
            r = v.region_of(i)
            out.append(TEXT if r is None else REGION_BASE + r)
    return out


# ---------------------------------------------------------------- supervision

def build_loss_mask(record: InstructionRecord, rendered: Rendered, v: Vocab | None = None) -> list[int]:
    """1 where a token is supervised: answer text, plus its ``###`` in stage 2.

    Image and region slots are never supervised, even inside an answer.
    """
    kinds = rendered.kinds
    supervised = ("answer", "stop") if record.stage == 2 else ("answer",)
    mask = [1 if k in supervised else 0 for k in kinds]
    if v is not None:
        for t, code in enumerate(provenance_codes(rendered.ids, v)):
            if code != TEXT:
                mask[t] = 0
    if record.stage == 2:
        _check_terminated(record, kinds)
    return mask


def _check_terminated(record, kinds):
    n_answers = sum(1 for t in record.conversation if t.role == "answer")
    spans = 0
    t = 0
    while t < len(kinds):
        if kinds[t] == "answer":
            spans += 1
            while t < len(kinds) and kinds[t] == "answer":
                t += 1
            if t >= len(kinds) or kinds[t] != "stop":
                raise UnterminatedAnswer(f"{record.id}: answer {spans} is not followed by {STOP_TOKEN}")
        else:
            t += 1
    if spans != n_answers:
        raise UnterminatedAnswer(f"{record.id}: {n_answers - spans} empty answer(s)")


def next_token_targets(tokens: Sequence[int]) -> list[int]:
    if len(tokens) < 2:
        raise SequenceTooShort(f"need at least 2 tokens, got {len(tokens)}")
    return list(tokens[1:]) + [IGNORE_INDEX]


def prediction_mask(loss_mask: Sequence[int]) -> list[int]:
    """Loss mask aligned with next-token targets: position t predicts token t+1."""
    return list(loss_mask[1:]) + [0]


# ---------------------------------------------------------------- assembly

@dataclass
class InterleavedSequence:
    embeddings: torch.Tensor  # T x D
    token_ids: list[int]
    provenance: list[int]
    loss_mask: list[int]
    target_ids: list[int]
    kinds: list[str]

    def __len__(self):
        return len(self.token_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def slot_positions(self) -> list[int]:
        return [t for t, c in enumerate(self.provenance) if c != TEXT]


def assemble(record: InstructionRecord, table: torch.Tensor, image_emb: torch.Tensor | None,
             region_embs: Mapping[int, torch.Tensor], v: Vocab) -> InterleavedSequence:
    """Embed the rendered record and drop image/region vectors into their slots."""
    if image_emb is None:
        raise MissingImageEmbedding(f"{record.id}: no image embedding")
    rendered = render_tokens(record, v)
    ids = rendered.ids
    prov = provenance_codes(ids, v)
    if prov.count(IMAGE) != 1:
        raise InvalidRecord(f"{record.id}: expected one {IMAGE_TOKEN} slot, found {prov.count(IMAGE)}; "
                            "was the prefix prepended?")
    mask = build_loss_mask(record, rendered, v)
    targets = next_token_targets(ids)

    idx = torch.tensor(ids, dtype=torch.long)
    emb = table[idx]
    slot_pos, slot_vecs = [], []
    for t, code in enumerate(prov):
        if code == IMAGE:
            vec = image_emb
        elif code != TEXT:
            r = code - REGION_BASE
            if r not in region_embs:
                raise MissingRegionEmbedding(r)
            vec = region_embs[r]
        else:
            continue
        slot_pos.append(t)
        slot_vecs.append(vec.to(emb.dtype))
    emb = emb.index_put((torch.tensor(slot_pos, dtype=torch.long),), torch.stack(slot_vecs))
    return InterleavedSequence(emb, ids, prov, mask, targets, rendered.kinds)


def referenced_regions(record: InstructionRecord) -> list[int]:
    seen: list[int] = []
    for t in record.conversation:
        for i in placeholder_indices(t.text):
            if i not in seen:
                seen.append(i)
    return sorted(seen)
