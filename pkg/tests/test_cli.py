import csv
import json

import pytest
import torch

from roitune.cli import main
from roitune.converters import fixture_dir
from roitune.formats import read_grck, read_grsq, write_grfm
from roitune.records import read_records

FIX = fixture_dir()


def coco_sample(path, truncate=False):
    doc = {
        "images": [{"id": k, "width": 100, "height": 80} for k in (1, 2, 3)],
        "annotations": [{"id": 10 + k, "image_id": k, "category_id": 1 + k % 2, "bbox": [5, 5, 20 + k, 30]}
                        for k in (1, 2, 3)],
        "categories": [{"id": 1, "name": "person"}, {"id": 2, "name": "dog"}],
    }
    text = json.dumps(doc)
    path.write_text(text[:-1] if truncate else text)
    return path


def features(tmp_path, ids, c=3, seed=0):
    d = tmp_path / "feat"
    d.mkdir(exist_ok=True)
    g = torch.Generator().manual_seed(seed)
    for i in ids:
        write_grfm(d / f"{i}.grfm", [torch.randn(c, 6, 6, generator=g) for _ in range(4)])
    return d


def test_convert_coco(tmp_path, capsys):
    out = tmp_path / "r.jsonl"
    assert main(["convert", "--source", "coco", "--in", str(coco_sample(tmp_path / "c.json")), "--out", str(out),
                 "--seed", "1", "--stage", "1"]) == 0
    assert len(read_records(out)) == 3
    assert "records=3 skipped=0 flagged=0" in capsys.readouterr().out


def test_convert_truncated(tmp_path, capsys):
    rc = main(["convert", "--source", "coco", "--in", str(coco_sample(tmp_path / "c.json", truncate=True)),
               "--out", str(tmp_path / "r.jsonl")])
    assert rc == 1
    size = (tmp_path / "c.json").stat().st_size
    assert f"(byte {size})" in capsys.readouterr().err


def test_convert_stage_mismatch(tmp_path):
    assert main(["convert", "--source", "vg", "--in", str(FIX / "region_caption.jsonl"),
                 "--out", str(tmp_path / "r.jsonl"), "--stage", "1"]) == 1


def test_convert_deterministic_and_env_seed(tmp_path, monkeypatch):
    src = str(FIX / "region_caption.jsonl")
    main(["convert", "--source", "vg", "--in", src, "--out", str(tmp_path / "a.jsonl"), "--seed", "3462"])
    monkeypatch.setenv("GPT4ROI_SEED", "3462")
    main(["convert", "--source", "vg", "--in", src, "--out", str(tmp_path / "b.jsonl"), "--jobs", "2"])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_build_seq(tmp_path, capsys):
    recs = tmp_path / "r.jsonl"
    main(["convert", "--source", "vg", "--in", str(FIX / "region_caption.jsonl"), "--out", str(recs)])
    feat = features(tmp_path, ["vg_1"])
    capsys.readouterr()
    assert main(["build-seq", "--records", str(recs), "--features", str(feat), "--out", str(tmp_path / "seq"),
                 "--dim", "8", "--image-size", "640x480"]) == 0
    assert "flat=980" in capsys.readouterr().out  # 14 * 14 * (3 + 2)
    seq = read_grsq(tmp_path / "seq" / "vg-vg_1.grsq")
    assert seq["provenance"].count(1) == 1 and seq["embeddings"].shape[1] == 8
    assert (tmp_path / "seq" / "vocab.txt").exists()
    rows = list(csv.DictReader(open(tmp_path / "seq" / "index.csv")))
    assert rows[0]["image_slots"] == "1" and rows[0]["region_slots"] == "1"


def test_build_seq_missing_features(tmp_path, capsys):
    recs = tmp_path / "r.jsonl"
    main(["convert", "--source", "vg", "--in", str(FIX / "region_caption.jsonl"), "--out", str(recs)])
    (tmp_path / "feat").mkdir()
    assert main(["build-seq", "--records", str(recs), "--features", str(tmp_path / "feat"),
                 "--out", str(tmp_path / "seq")]) == 1
    assert "vg_1" in capsys.readouterr().err


def test_build_seq_region_without_box(tmp_path, capsys):
    bad = {"id": "x", "image_id": "vg_1", "stage": 2, "source": "vg", "regions": [{"i": 1, "box": [0, 0, 5, 5]}],
           "conversation": [{"role": "question", "text": "<region1> and <region4>?"},
                            {"role": "answer", "text": "yes"}]}
    (tmp_path / "r.jsonl").write_text(json.dumps(bad) + "\n")
    assert main(["build-seq", "--records", str(tmp_path / "r.jsonl"), "--features", str(features(tmp_path, ["vg_1"])),
                 "--out", str(tmp_path / "seq")]) == 1
    assert "[4]" in capsys.readouterr().err


def test_roialign(tmp_path):
    feat = features(tmp_path, ["im"])
    out = tmp_path / "r.csv"
    assert main(["roialign", "--features", str(feat / "im.grfm"), "--box", "10,10,60,50", "--image-size", "100x80",
                 "--pool", "4", "--out", str(out), "--plot", str(tmp_path / "r.png")]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["row", "col", "c0", "c1", "c2"] and len(rows) == 17
    assert (tmp_path / "r.png").read_bytes()[:4] == b"\x89PNG"


def test_roialign_degenerate_box(tmp_path):
    feat = features(tmp_path, ["im"])
    assert main(["roialign", "--features", str(feat / "im.grfm"), "--box", "10,10,10,50", "--image-size", "100x80",
                 "--out", str(tmp_path / "r.csv")]) == 1


def test_train_toy(tmp_path, capsys):
    recs = tmp_path / "r.jsonl"
    main(["convert", "--source", "vg", "--in", str(FIX / "region_caption.jsonl"), "--out", str(recs)])
    feat = features(tmp_path, ["vg_1"])
    cfg = tmp_path / "toy.cfg"
    cfg.write_text("# desk scale\nwarmup_iters = 0\nwarmup_ratio = 0.1\n")
    args = ["train-toy", "--records", str(recs), "--features", str(feat), "--steps", "6", "--lr", "0.01",
            "--config", str(cfg), "--image-size", "640x480"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--no-plot"]) == 0
    a = (tmp_path / "a" / "loss.csv").read_bytes()
    assert a == (tmp_path / "b" / "loss.csv").read_bytes()
    assert len(a.splitlines()) == 7
    assert (tmp_path / "a" / "loss.png").exists() and not (tmp_path / "b" / "loss.png").exists()
    state = read_grck(tmp_path / "a" / "checkpoint.grck")
    assert "embed" in state
    # the checkpoint loads back into build-seq
    assert main(["build-seq", "--records", str(recs), "--features", str(feat), "--out", str(tmp_path / "s"),
                 "--vocab", str(tmp_path / "a" / "vocab.txt"), "--checkpoint", str(tmp_path / "a" / "checkpoint.grck"),
                 "--image-size", "640x480"]) == 0


def test_train_toy_warmup_too_long(tmp_path):
    recs = tmp_path / "r.jsonl"
    main(["convert", "--source", "vg", "--in", str(FIX / "region_caption.jsonl"), "--out", str(recs)])
    assert main(["train-toy", "--records", str(recs), "--features", str(features(tmp_path, ["vg_1"])),
                 "--steps", "5", "--out", str(tmp_path / "t")]) == 1


def test_verify_exit_codes(tmp_path, capsys):
    assert main(["verify", "--suite", "converters"]) == 0
    assert "PASS converters.golden.detection" in capsys.readouterr().out
    (tmp_path / "empty").mkdir()
    assert main(["verify", "--suite", "converters", "--fixtures", str(tmp_path / "empty")]) == 1
    assert "no converter fixtures" in capsys.readouterr().err


def test_verify_mutation_exit_2(monkeypatch, capsys):
    from roitune import roi

    def off_by_one(coord, size):
        c = coord.clamp(0.0, size - 1.0)
        lo = c.floor().long()
        return lo, (lo + 1).clamp(max=size), c - lo

    monkeypatch.setattr(roi, "_corners", off_by_one)
    assert main(["verify", "--suite", "kernels"]) == 2
    assert "FAIL kernels.point_oracle" in capsys.readouterr().out


def test_no_subcommand():
    with pytest.raises(SystemExit):
        main([])
