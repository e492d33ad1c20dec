import itertools
import json
import random
import re

import pytest

from roitune.converters import (
    MULTI_BANK, SINGLE_BANK, VCR_BANK, ChatItem, ChoiceItem, Detection, IngestStats, RegionAnnotation,
    RegionEntry, V7wItem, VcrItem, augment_chat_with_boxes, convert_detection, convert_file,
    convert_multi_region_caption, convert_refexp, convert_region_caption, convert_v7w, convert_vcr_chat,
    convert_vcr_choice, fixture_dir, ingest_coco_json, item_rng, load_manifest, read_annotations,
    write_annotations,
)
from roitune.errors import (
    BadOptionCount, DanglingCategoryId, EmptyCaption, MissingCategory, ParseError, TooFewRegions,
    UnknownCategory,
)
from roitune.geometry import Box, ImageSize
from roitune.records import InstructionRecord, Turn, placeholder_indices
from roitune.sequence import Vocab, assemble, prepend_prefix, render_text
from roitune.converters.templates import MAY_FEATURE

FIX = fixture_dir()
MANIFEST = load_manifest(FIX)
SIZE = ImageSize(640, 480)


def boxes(k, seed=0):
    rng = random.Random(seed)
    out = []
    for _ in range(k):
        x, y = rng.uniform(0, 500), rng.uniform(0, 380)
        out.append(Box(x, y, x + rng.uniform(5, 130), y + rng.uniform(5, 90)))
    return out


def ann(k, text=None, cats=None, caption=None, image_id="im"):
    return RegionAnnotation(image_id, SIZE, tuple(
        RegionEntry(b, text[j] if text else None, cats[j] if cats else None) for j, b in enumerate(boxes(k))),
        caption)


def lcg_draw(seed, key, n):
    """Independent seeded-uniform draw: FNV-1a key hash, one LCG step, high word scaled."""
    h = 14695981039346656037
    for b in key.encode():
        h = ((h ^ b) * 1099511628211) % 2**64
    state = ((seed % 2**64) ^ h) * 6364136223846793005 + 1442695040888963407
    return (((state % 2**64) >> 32) * n) >> 32


# goldens

@pytest.mark.parametrize("case", MANIFEST["cases"], ids=lambda c: c["name"])
def test_golden(case):
    res = convert_file(case["source"], FIX / case["input"], MANIFEST["seed"], case.get("mode", "QA"))
    expected = (FIX / case["golden"]).read_text(encoding="utf-8").removesuffix("\n")
    assert render_text(res.records[0]) == expected


@pytest.mark.parametrize("bank", [SINGLE_BANK, MULTI_BANK, VCR_BANK], ids=lambda b: b.name)
def test_bank_golden(bank):
    lines = (FIX / MANIFEST["banks"][bank.name]).read_text(encoding="utf-8").splitlines()
    assert list(bank.entries) == lines
    assert len(set(lines)) == len(lines)


def test_bank_sizes():
    assert (len(SINGLE_BANK), len(MULTI_BANK), len(VCR_BANK)) == (20, 20, 30)


# rng

def test_rng_oracle():
    for key in ["vg-1", "vg-2", "flickr-x", "vcr-chat-val-9"]:
        for n in (20, 30):
            assert item_rng(0, key).below(n) == lcg_draw(0, key, n)
    a = ann(1, text=["a cat"], image_id="42")
    rec = convert_region_caption(a, 0)
    assert rec.conversation[0].text == SINGLE_BANK[lcg_draw(0, "vg-42", 20)]


def test_all_templates_reachable():
    seen = {item_rng(s, "vg-1").below(20) for s in range(10_000)}
    assert seen == set(range(20))


def test_shuffle_is_permutation():
    for s in range(50):
        xs = list(range(9))
        item_rng(s, "k").shuffle(xs)
        assert sorted(xs) == list(range(9))


# detection / refexp

def test_detection_skip_and_unknown():
    assert convert_detection(ann(0), ["person"], 0) is None
    with pytest.raises(UnknownCategory):
        convert_detection(ann(1, cats=["zebra"]), ["person"], 0)


def test_detection_deterministic_and_seed_only_reorders():
    a = ann(6, cats=["person", "dog", "car", "dog", "person", "car"])
    r1, r2 = convert_detection(a, ["person", "dog", "car"], 5), convert_detection(a, ["person", "dog", "car"], 5)
    assert render_text(r1) == render_text(r2)
    pairs = lambda r: sorted(zip((x.box.as_tuple() for x in r.regions), [t.text for t in r.conversation if t.role == "answer"]))
    assert pairs(convert_detection(a, ["person", "dog", "car"], 6)) == pairs(r1)
    assert r1.stage == 1


def test_refexp_long_flag():
    a = ann(2, text=["red shirt girl", "the tall man standing on the far left"])
    r = convert_refexp(a)
    assert r.flags == ("long-expression:region2",)
    assert render_text(convert_refexp(ann(1, text=["guy"]))).endswith("<region1> guy")


# captions

def test_region_caption_empty():
    with pytest.raises(EmptyCaption):
        convert_region_caption(ann(1, text=["  "]), 0)


def test_multi_caption_guard_and_order():
    with pytest.raises(TooFewRegions):
        convert_multi_region_caption(ann(1, caption="x"), 0)
    rng = random.Random(1)
    for s in range(40):
        k = rng.randint(2, 12)
        r = convert_multi_region_caption(ann(k, caption="a scene"), s)
        assert placeholder_indices(r.conversation[0].text) == list(range(1, k + 1))
        assert r.stage == 2


# VCR

def vcr_item(k=3, cats=("person",) * 3, answer="<region1> looks at <region2>.", rationale="<region3> waves."):
    return VcrItem("v1", "img", SIZE, tuple(RegionEntry(b, None, c) for b, c in zip(boxes(k), cats)),
                   "What is <region1> doing?", answer, rationale)


def test_vcr_chat_structure():
    r = convert_vcr_chat(vcr_item(), 0)
    roles = [t.role for t in r.conversation]
    assert roles == ["system", "question", "answer", "question", "answer"]
    assert r.conversation[0].text == "There are <region1>, <region2>, <region3> in the image."
    assert r.conversation[2].text == "Person at region1 looks at person at region2."
    assert r.conversation[3].text in VCR_BANK.entries


def test_vcr_chat_missing_category():
    with pytest.raises(MissingCategory):
        convert_vcr_chat(vcr_item(cats=("person", None, "dog")), 0)


def choice_item(options, label, rat=None, rlabel=None):
    c = ChoiceItem("How is 1 feeling ?", tuple(options), label, tuple(rat or ()), rlabel)
    return VcrItem("c1", "img", SIZE, tuple(RegionEntry(b, None, "person") for b in boxes(2)), c.question, choice=c)


def test_vcr_choice_bad_count():
    with pytest.raises(BadOptionCount):
        convert_vcr_choice(choice_item(["a", "b", "c"], "A"))
    with pytest.raises(BadOptionCount):
        convert_vcr_choice(choice_item(list("abcd"), "A", ["x"], "A"), "QAR")


def test_vcr_choice_permutation_harness():
    opts = ["amused", "upset", "scared", "calm"]
    for perm in itertools.permutations(range(4)):
        permuted = [opts[p] for p in perm]
        label = "ABCD"[perm.index(2)]
        r = convert_vcr_choice(choice_item(permuted, label))
        target = r.conversation[-1].text
        assert target == f"({label})"
        assert f"{target},scared" in r.conversation[0].text


# V7W

def test_v7w_guard_and_shuffle_oracle():
    bs = boxes(4)
    with pytest.raises(BadOptionCount):
        convert_v7w(V7wItem("q", "img", SIZE, "Which?", tuple(bs[:3]), 0), 0)
    for s in range(30):
        for gt in range(4):
            r = convert_v7w(V7wItem("q", "img", SIZE, "Which?", tuple(bs), gt), s)
            letter = r.conversation[-1].text[1]
            assert r.region_boxes()["ABCD".index(letter) + 1] == bs[gt]


# chat augmentation

def chat(dets):
    rec = InstructionRecord("llava-7", "im", 2, "llava150k", (),
                            (Turn("question", "What is here?"), Turn("answer", "Things.")))
    return ChatItem(rec, SIZE, tuple(dets))


def test_augment_three_boxes():
    names = ["person", "dog", "car"]
    r = augment_chat_with_boxes(chat(Detection(b, n) for b, n in zip(boxes(3), names)))
    lines = r.conversation[0].text.split("\n")
    assert lines == [MAY_FEATURE.format(i=i, class_name=n) for i, n in enumerate(names, 1)] + ["What is here?"]
    assert lines[0] == "<region1> may feature a person"
    assert r.conversation[1] == Turn("answer", "Things.")


def test_augment_cap():
    r = augment_chat_with_boxes(chat(Detection(b, "thing") for b in boxes(150)))
    assert len(r.regions) == 100
    assert r.conversation[0].text.count("may feature") == 100


def test_augment_no_boxes_passthrough():
    item = chat([])
    r = augment_chat_with_boxes(item)
    assert r.conversation == item.record.conversation and r.stage == 2 and r.regions == ()


# COCO ingest

def coco_doc():
    return {
        "images": [{"id": 1, "width": 100, "height": 100}, {"id": 2, "width": 50, "height": 60},
                   {"id": 3, "width": 80, "height": 80}],
        "annotations": [
            {"id": 10, "image_id": 1, "category_id": 1, "bbox": [10, 10, 10, 20]},
            {"id": 11, "image_id": 9, "category_id": 1, "bbox": [0, 0, 5, 5]},
            {"id": 12, "image_id": 2, "category_id": 2, "bbox": [1.25, 2.5, 30.125, 40.75]},
        ],
        "categories": [{"id": 1, "name": "person"}, {"id": 2, "name": "dog"}],
    }


def test_coco_ingest(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(coco_doc()))
    stats = IngestStats()
    anns = list(ingest_coco_json(p, stats))
    assert len(anns) == 3 and stats.dropped_missing_image == 1
    assert anns[0].entries[0].box == Box(10, 10, 20, 30)
    assert anns[0].entries[0].category == "person"
    res = convert_file("coco", p, 0)
    assert len(res.records) == 2 and res.skipped == 1


def test_coco_dangling_category(tmp_path):
    doc = coco_doc()
    doc["annotations"][0]["category_id"] = 7
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(DanglingCategoryId):
        list(ingest_coco_json(p))


def test_coco_parse_error_offset(tmp_path):
    text = json.dumps(coco_doc())
    p = tmp_path / "c.json"
    p.write_text(text[:57])
    with pytest.raises(ParseError) as ei:
        list(ingest_coco_json(p))
    assert ei.value.offset == 57


def test_coco_normalized_roundtrip(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(coco_doc()))
    anns = list(ingest_coco_json(p))
    write_annotations(tmp_path / "n.jsonl", anns)
    back = list(read_annotations(tmp_path / "n.jsonl"))
    for a, b in zip(anns, back, strict=True):
        for ea, eb in zip(a.entries, b.entries, strict=True):
            assert max(abs(u - v) for u, v in zip(ea.box.as_tuple(), eb.box.as_tuple())) <= 1e-9


def test_jobs_do_not_change_output():
    case = next(c for c in MANIFEST["cases"] if c["source"] == "vg")
    one = convert_file("vg", FIX / case["input"], 11)
    four = convert_file("vg", FIX / case["input"], 11, jobs=4)
    assert [r.to_json() for r in one.records] == [r.to_json() for r in four.records]


# composition with the sequence builder

def test_converter_output_assembles():
    import torch
    rng = random.Random(3)
    recs = []
    for n in range(60):
        k = rng.randint(2, 6)
        a = ann(k, text=[f"thing {j}" for j in range(k)], cats=["person"] * k, caption="a busy street",
                image_id=str(n))
        recs += [convert_detection(a, ["person"], n), convert_refexp(a), convert_region_caption(a, n),
                 convert_multi_region_caption(a, n)]
        recs.append(convert_vcr_chat(vcr_item(), n))
    for r in recs:
        r = prepend_prefix(r)
        v = Vocab.from_records([r])
        table = torch.zeros(len(v), 4)
        regions = {x.i: torch.ones(4) for x in r.regions}
        seq = assemble(r, table, torch.ones(4), regions, v)
        final = render_text(r, rewrite=True)
        for i in regions:
            assert seq.provenance.count(1 + i) == len(re.findall(f"<region{i}>", final))
        assert sum(seq.loss_mask) > 0
