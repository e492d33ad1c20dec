"""Property suites behind ``roitune verify``.

Each property returns ``(ok, detail)``; an exception inside a property counts
as a failure so a broken kernel is reported instead of crashing the run.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import roi
from .converters import SINGLE_BANK, MULTI_BANK, VCR_BANK, convert_file, fixture_dir, load_manifest
from .converters.templates import EXPECTED_BANK_SIZES
from .errors import NoFixtures
from .geometry import Box, ImageSize
from .oracles import roi_align_dense, roi_align_points
from .records import InstructionRecord, Region, Turn
from .sequence import IMAGE, Vocab, assemble, build_loss_mask, prepend_prefix, render_text, render_tokens, \
    rewrite_references

SUITES = ("kernels", "sequences", "converters")


@dataclass
class Result:
    suite: str
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.suite}.{self.name}: {self.detail}"


def _run(suite: str, props: dict[str, Callable[[], tuple[bool, str]]]) -> list[Result]:
    out = []
    for name, fn in props.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a property that raises has failed
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(Result(suite, name, bool(ok), detail))
    return out


# ---------------------------------------------------------------- kernels

@dataclass
class KernelCase:
    fm: np.ndarray
    box: Box
    img: ImageSize
    pool: int
    samples: int


def random_kernel_case(rng: np.random.Generator, max_grid=16, max_c=8, max_pool=4, max_samples=3) -> KernelCase:
    c = int(rng.integers(1, max_c + 1))
    h, w = (int(x) for x in rng.integers(1, max_grid + 1, size=2))
    img = ImageSize(int(rng.integers(16, 400)), int(rng.integers(16, 400)))
    if rng.random() < 0.2:  # touch the border so clamping is exercised
        box = Box(0.0, 0.0, float(img.width), float(img.height))
    else:
        x1, x2 = sorted(rng.uniform(0, img.width, size=2))
        y1, y2 = sorted(rng.uniform(0, img.height, size=2))
        box = Box(x1, y1, max(x2, x1 + 0.5), max(y2, y1 + 0.5))
    return KernelCase(rng.standard_normal((c, h, w)), box, img, int(rng.integers(1, max_pool + 1)),
                      int(rng.integers(1, max_samples + 1)))


def kernel_error(case: KernelCase) -> float:
    got = roi.roi_align(torch.from_numpy(case.fm), case.box, case.img, case.pool, case.samples).numpy()
    ref = roi_align_points(case.fm, case.box.as_tuple(), case.img.width, case.img.height, case.pool, case.samples)
    return float(np.abs(got - ref).max())


def _point_oracle(n=200, tol=1e-9):
    rng = np.random.default_rng(1234)
    worst = max(kernel_error(random_kernel_case(rng)) for _ in range(n))
    return worst <= tol, f"{n} cases, max |diff| {worst:.2e} (tol {tol:g})"


def _dense_limit(tol=1e-4):
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(5):
        case = random_kernel_case(rng, max_grid=8, max_c=2, max_pool=2)
        got = roi.roi_align(torch.from_numpy(case.fm), case.box, case.img, case.pool, 64).numpy()
        ref = roi_align_dense(case.fm, case.box.as_tuple(), case.img.width, case.img.height, case.pool, 64)
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst <= tol, f"s=64 vs dense integral, max |diff| {worst:.2e}"


def _constant_field():
    fm = torch.full((3, 7, 5), 2.5, dtype=torch.float64)
    out = roi.roi_align(fm, Box(0, 0, 100, 100), ImageSize(100, 100), 14, 2)
    err = float((out - 2.5).abs().max())
    return err <= 1e-12, f"max |diff| {err:.1e}"


def _linear_ramp():
    h, w = 9, 12
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                            indexing="ij")
    fm = (0.75 * xs - 1.25 * ys + 0.5)[None]
    img = ImageSize(w * 10, h * 10)
    b = Box(23.0, 17.0, 91.0, 74.0)
    pool = 4
    out = roi.roi_align(fm, b, img, pool, 2)[..., 0]
    # bilinear interpolation is exact on a plane, so each bin equals the plane at its centre
    cx = (b.x1 / 10 - 0.5) + (torch.arange(pool, dtype=torch.float64) + 0.5) * (b.width / 10) / pool
    cy = (b.y1 / 10 - 0.5) + (torch.arange(pool, dtype=torch.float64) + 0.5) * (b.height / 10) / pool
    expect = 0.75 * cx[None, :] - 1.25 * cy[:, None] + 0.5
    err = float((out - expect).abs().max())
    return err <= 1e-9, f"max |diff| {err:.1e}"


def _pyramid_shapes():
    stack = roi.LayerStack([torch.zeros(3, 5, 7, dtype=torch.float64) for _ in range(4)])
    pyr = roi.build_pyramid(stack, roi.identity_mix(3))
    want = [(10, 14), (5, 7), (3, 4), (2, 2)]
    ok = pyr.sizes() == want and all(lv.shape[0] == 5 for lv in pyr.levels)
    return ok, f"sizes {pyr.sizes()}"


def _flatten_length():
    stack = roi.LayerStack([torch.ones(6, 4, 4, dtype=torch.float64) for _ in range(4)])
    flat = roi.fuse_levels(roi.build_pyramid(stack, roi.identity_mix(6)), Box(1, 1, 30, 30), ImageSize(32, 32))
    return flat.numel() == 14 * 14 * 8, f"P=14, C=6 -> {flat.numel()}"


def kernels() -> list[Result]:
    return _run("kernels", {
        "point_oracle": _point_oracle, "dense_limit": _dense_limit, "constant_field": _constant_field,
        "linear_ramp": _linear_ramp, "pyramid_shapes": _pyramid_shapes, "flatten_length": _flatten_length,
    })


# ---------------------------------------------------------------- sequences

_WORDS = ["dog", "man", "left", "red", "is", "what", "the", "on", "region2", "###x", "<"]


def random_record(rng: random.Random, n: int) -> InstructionRecord:
    k = rng.randint(0, 6)
    idx = sorted(rng.sample(range(1, 101), k))
    regions = tuple(Region(i, Box(i % 50, i % 40, i % 50 + 10, i % 40 + 10)) for i in idx)
    turns = []
    stage = rng.choice((1, 2))
    for _ in range(rng.randint(1, 3)):
        q = " ".join(rng.choice(_WORDS + [f"<region{i}>" for i in idx]) for _ in range(rng.randint(1, 10)))
        turns += [Turn("question", q), Turn("answer", " ".join(rng.choices(_WORDS[:8], k=rng.randint(1, 4))))]
    return prepend_prefix(InstructionRecord(f"fuzz-{n}", "img", stage, "fuzz", regions, tuple(turns)))


def check_sequence(record: InstructionRecord, seed: int = 0) -> list[str]:
    """Violated invariants of one assembled record (empty when all hold)."""
    v = Vocab.from_records([record])
    g = torch.Generator().manual_seed(seed)
    table = torch.randn(len(v), 4, generator=g, dtype=torch.float64)
    regions = {r.i: torch.randn(4, generator=g, dtype=torch.float64) for r in record.regions}
    seq = assemble(record, table, torch.randn(4, generator=g, dtype=torch.float64), regions, v)
    final = render_text(record, rewrite=True)
    bad = []
    if seq.provenance.count(IMAGE) != 1:
        bad.append("image slots != 1")
    for r in record.regions:
        if seq.provenance.count(1 + r.i) != final.count(f"<region{r.i}>"):
            bad.append(f"region{r.i} slot count")
    if any(seq.loss_mask[t] for t in seq.slot_positions()):
        bad.append("mask overlaps slots")
    for t in record.conversation:
        once = rewrite_references(t.text)
        if rewrite_references(once) != once:
            bad.append("rewrite not idempotent")
    return bad


def _fuzz(n=300):
    rng = random.Random(2024)
    failures = [(i, b) for i in range(n) for b in [check_sequence(random_record(rng, i), i)] if b]
    return not failures, f"{n} records, {len(failures)} failing" + (f", first {failures[0]}" if failures else "")


def _mask_coverage():
    rec = prepend_prefix(InstructionRecord("m", "img", 2, "t", (Region(1, Box(0, 0, 5, 5)),), (
        Turn("question", "Describe <region1>."), Turn("answer", "A red dog."),
        Turn("question", "Why?"), Turn("answer", "It sits."))))
    v = Vocab.from_records([rec])
    rd = render_tokens(rec, v)
    mask = build_loss_mask(rec, rd, v)
    masked = [v.tokens[i] for i, m in zip(rd.ids, mask) if m]
    want = ["A", "red", "dog.", "###", "It", "sits.", "###"]
    return masked == want, f"masked {masked}"


def sequences() -> list[Result]:
    return _run("sequences", {"invariant_fuzz": _fuzz, "mask_coverage": _mask_coverage})


# ---------------------------------------------------------------- converters

def converters(fixtures: Path | None = None) -> list[Result]:
    fixtures = Path(fixtures) if fixtures is not None else fixture_dir()
    manifest = load_manifest(fixtures)
    if not manifest.get("cases"):
        raise NoFixtures(f"no converter fixtures under {fixtures}")
    props: dict[str, Callable[[], tuple[bool, str]]] = {}
    for case in manifest["cases"]:
        def golden(case=case):
            res = convert_file(case["source"], fixtures / case["input"], manifest["seed"], case.get("mode", "QA"))
            expected = (fixtures / case["golden"]).read_text(encoding="utf-8").removesuffix("\n")
            got = render_text(res.records[0])
            return got == expected, "byte-identical" if got == expected else f"differs: {got[:60]!r}..."
        props[f"golden.{case['name']}"] = golden
    for bank in (SINGLE_BANK, MULTI_BANK, VCR_BANK):
        def bank_check(bank=bank):
            want = EXPECTED_BANK_SIZES[bank.name]
            ok = len(bank) == want and len(set(bank.entries)) == want
            path = manifest.get("banks", {}).get(bank.name)
            if path:
                ok = ok and (fixtures / path).read_text(encoding="utf-8").splitlines() == list(bank.entries)
            return ok, f"{len(bank)} entries (want {want})"
        props[f"bank.{bank.name}"] = bank_check
    return _run("converters", props)


def run(suite: str = "all", fixtures: Path | None = None) -> list[Result]:
    if suite == "all":
        return kernels() + sequences() + converters(fixtures)
    if suite == "kernels":
        return kernels()
    if suite == "sequences":
        return sequences()
    if suite == "converters":
        return converters(fixtures)
    raise ValueError(f"unknown suite {suite!r}")
