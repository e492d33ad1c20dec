"""``roitune`` command line: convert, build-seq, roialign, train-toy, verify.

Exit codes: 0 ok, 1 input error, 2 property failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .converters import STAGE_OF_SOURCE, SOURCES, convert_file
from .errors import InputError, MissingFeatureFile, PropertyFailure, RoiTuneError, ShapeMismatch
from .formats import read_config, read_grck, read_grfm, write_grck, write_grsq
from .geometry import Box, ImageSize
from .model import PRESETS, RegionPipeline, ensure_prefix, train
from .records import read_records, write_records
from .roi import DEFAULT_POOL, DEFAULT_SAMPLES, LayerStack, roi_align
from .sequence import IMAGE, Vocab

log = logging.getLogger("roitune")
SEED_ENV = "GPT4ROI_SEED"


def resolve_seed(value):
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise InputError(f"{SEED_ENV}={env!r} is not an integer") from exc


def _image_size(text):
    try:
        return ImageSize.parse(text)
    except (ValueError, InputError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _box(text):
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"box must be x1,y1,x2,y2: {text!r}") from exc
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"box must have 4 numbers, got {len(parts)}")
    return Box(*parts)


# ---------------------------------------------------------------- shared loading

class FeatureStore:
    """``{features}/{image_id}.grfm`` loader plus per-image sizes."""

    def __init__(self, root, default_size: ImageSize, sizes_path=None):
        self.root = Path(root)
        self.default = default_size
        self.sizes = {}
        if sizes_path:
            try:
                raw = json.loads(Path(sizes_path).read_text(encoding="utf-8"))
                self.sizes = {str(k): ImageSize(int(v[0]), int(v[1])) for k, v in raw.items()}
            except (OSError, ValueError, TypeError, IndexError) as exc:
                raise InputError(f"cannot read image sizes from {sizes_path}: {exc}") from exc
        self._cache = {}

    def stack(self, image_id: str) -> LayerStack:
        if image_id not in self._cache:
            path = self.root / f"{image_id}.grfm"
            if not path.is_file():
                raise MissingFeatureFile(image_id, path)
            self._cache[image_id] = LayerStack(read_grfm(path))
        return self._cache[image_id]

    def size(self, image_id: str) -> ImageSize:
        return self.sizes.get(image_id, self.default)


def _load_vocab(path, records, out_dir):
    if path and Path(path).is_file():
        return Vocab.load(path)
    v = Vocab.from_records(records)
    target = Path(path) if path else Path(out_dir) / "vocab.txt"
    target.parent.mkdir(parents=True, exist_ok=True)
    v.save(target)
    return v


def _build_pipeline(args, vocab, channels, seed):
    model = RegionPipeline(vocab, channels, dim=args.dim, heads=args.heads, layers=args.layers,
                           pool=args.pool, samples=args.samples, seed=seed)
    if getattr(args, "checkpoint", None):
        state = read_grck(args.checkpoint)
        own = model.state_dict()
        if set(state) != set(own) or any(state[k].shape != own[k].shape for k in own):
            raise ShapeMismatch(f"checkpoint {args.checkpoint} does not match the model configuration")
        model.load_state_dict(state)
    return model


def _examples(args):
    records = [ensure_prefix(r) for r in read_records(args.records)]
    if not records:
        raise InputError(f"{args.records}: no records")
    store = FeatureStore(args.features, args.image_size, args.image_sizes)
    return records, store


# ---------------------------------------------------------------- commands

def cmd_convert(args) -> int:
    seed = resolve_seed(args.seed)
    if args.stage is not None and args.stage != STAGE_OF_SOURCE[args.source]:
        raise InputError(f"source {args.source} produces stage-{STAGE_OF_SOURCE[args.source]} records, "
                         f"not stage {args.stage}")
    res = convert_file(args.source, args.input, seed, mode=args.mode, cap=args.cap, jobs=args.jobs)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_records(args.out, res.records)
    print(f"records={len(res.records)} skipped={res.skipped} flagged={res.flagged} out={args.out}")
    if res.stats and res.stats.dropped_missing_image:
        print(f"dropped {res.stats.dropped_missing_image} annotations with missing images", file=sys.stderr)
    return 0


def cmd_build_seq(args) -> int:
    seed = resolve_seed(args.seed)
    records, store = _examples(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = _load_vocab(args.vocab, records, out)
    model = _build_pipeline(args, vocab, store.stack(records[0].image_id).channels, seed)
    rows = []
    with torch.no_grad():
        for rec in sorted(records, key=lambda r: r.id):
            seq = model.sequence(rec, store.stack(rec.image_id), store.size(rec.image_id))
            write_grsq(out / f"{rec.id}.grsq", seq)
            rows.append([rec.id, len(seq), seq.dim, seq.provenance.count(IMAGE),
                         sum(c > IMAGE for c in seq.provenance), sum(seq.loss_mask)])
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "tokens", "dim", "image_slots", "region_slots", "masked"])
        w.writerows(rows)
    print(f"sequences={len(rows)} dim={args.dim} pool={args.pool} flat={model.extractor.flat_size} out={out}")
    return 0


def cmd_roialign(args) -> int:
    maps = read_grfm(args.features)
    if not -len(maps) <= args.layer < len(maps):
        raise InputError(f"layer {args.layer} out of range for {len(maps)} layers")
    grid = roi_align(maps[args.layer], args.box, args.image_size, args.pool, args.samples)  # P x P x C
    p, _, c = grid.shape
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col"] + [f"c{k}" for k in range(c)])
        for i in range(p):
            for j in range(p):
                w.writerow([i, j] + [repr(float(x)) for x in grid[i, j]])
    if args.plot:
        from .plotting import roi_heatmap
        roi_heatmap(args.plot, grid.mean(dim=2).numpy())
    print(f"pool={p} channels={c} out={args.out}" + (f" plot={args.plot}" if args.plot else ""))
    return 0


def cmd_train_toy(args) -> int:
    seed = resolve_seed(args.seed)
    records, store = _examples(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PRESETS[args.preset]
    if args.config:
        cfg = cfg.with_overrides(read_config(args.config))
    flags = {"max_steps": args.steps, "lr": args.lr, "batch_size": args.batch_size,
             "warmup_iters": args.warmup_iters}
    overrides = {k: v for k, v in flags.items() if v is not None}
    cfg = cfg.with_overrides(overrides)
    vocab = _load_vocab(args.vocab, records, out)
    torch.manual_seed(seed)
    model = _build_pipeline(args, vocab, store.stack(records[0].image_id).channels, seed)
    examples = [(r, store.stack(r.image_id), store.size(r.image_id)) for r in sorted(records, key=lambda r: r.id)]
    lrs = []
    curve = train(model, examples, cfg, seed=seed, on_step=lambda s, lr, loss: lrs.append(lr))
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for s, (lr, loss) in enumerate(zip(lrs, curve), start=1):
            w.writerow([s, repr(lr), repr(loss)])
    write_grck(out / "checkpoint.grck", model.state_dict())
    if not args.no_plot:
        from .plotting import loss_curve
        loss_curve(out / "loss.png", curve, lrs)
    print(f"steps={len(curve)} first_loss={curve[0]:.4f} final_loss={curve[-1]:.4f} out={out}")
    return 0


def cmd_verify(args) -> int:
    from . import verify
    results = verify.run(args.suite, args.fixtures)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    if failed:
        raise PropertyFailure(f"{len(failed)} properties failed")
    return 0


# ---------------------------------------------------------------- parser

def _model_flags(p):
    p.add_argument("--dim", type=int, default=16, help="model width D")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--pool", type=int, default=DEFAULT_POOL, help="RoIAlign output size P")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES, help="sampling points per bin axis")
    p.add_argument("--checkpoint", help="GRCK weights to load")


def _data_flags(p):
    p.add_argument("--records", required=True, help="InstructionRecord JSONL")
    p.add_argument("--features", required=True, help="directory of {image_id}.grfm files")
    p.add_argument("--vocab", help="vocab file; built from the records when absent")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image-size", type=_image_size, default=ImageSize(224, 224),
                   help="WxH used for images missing from --image-sizes (default 224x224)")
    p.add_argument("--image-sizes", help="JSON object image_id -> [w, h]")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="roitune", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="annotations -> InstructionRecord JSONL")
    p.add_argument("--source", required=True, choices=SOURCES)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help=f"defaults to ${SEED_ENV}, else 0")
    p.add_argument("--stage", type=int, choices=(1, 2), help="assert the stage of the produced records")
    p.add_argument("--mode", choices=("QA", "QAR"), default="QA", help="vcr-choice prompt")
    p.add_argument("--cap", type=int, default=100, help="max detector boxes for chat-augment")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("build-seq", help="records + GRFM features -> GRSQ dumps")
    _data_flags(p)
    _model_flags(p)
    p.set_defaults(fn=cmd_build_seq)

    p = sub.add_parser("roialign", help="pool one box from one GRFM layer")
    p.add_argument("--features", required=True, help="GRFM file")
    p.add_argument("--box", required=True, type=_box, help="x1,y1,x2,y2 in image pixels")
    p.add_argument("--image-size", required=True, type=_image_size, help="WxH")
    p.add_argument("--layer", type=int, default=-1, help="layer index inside the file")
    p.add_argument("--pool", type=int, default=DEFAULT_POOL)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--out", required=True, help="CSV output")
    p.add_argument("--plot", help="PNG heatmap of the channel mean")
    p.set_defaults(fn=cmd_roialign)

    p = sub.add_parser("train-toy", help="train the toy pipeline; writes loss.csv, loss.png, checkpoint.grck")
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default="stage2")
    p.add_argument("--config", help="key = value overrides")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--warmup-iters", type=int, help="0 falls back to the warmup ratio")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", choices=("kernels", "sequences", "converters", "all"), default="all")
    p.add_argument("--fixtures", help="converter fixture directory (default: bundled)")
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except PropertyFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RoiTuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
