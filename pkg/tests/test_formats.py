import struct

import pytest
import torch

from roitune.errors import FormatError, ParseError
from roitune.formats import (
    parse_config, read_grck, read_grfm, read_grsq, write_grck, write_grfm, write_grsq,
)
from roitune.sequence import IGNORE_INDEX, InterleavedSequence


def test_grfm_layout(tmp_path):
    maps = [torch.arange(6, dtype=torch.float64).reshape(1, 2, 3), torch.full((1, 2, 3), 0.5)]
    write_grfm(tmp_path / "a.grfm", maps)
    raw = (tmp_path / "a.grfm").read_bytes()
    assert raw[:4] == b"GRFM"
    assert struct.unpack("<II", raw[4:12]) == (1, 2)
    assert struct.unpack("<III", raw[12:24]) == (1, 2, 3)
    assert struct.unpack("<6f", raw[24:48]) == (0, 1, 2, 3, 4, 5)
    assert len(raw) == 4 + 8 + 2 * (12 + 24)
    back = read_grfm(tmp_path / "a.grfm")
    assert all(torch.equal(a, b.double()) for a, b in zip(back, maps))


def test_grfm_errors(tmp_path):
    p = tmp_path / "b.grfm"
    write_grfm(p, [torch.zeros(2, 2, 2)])
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        read_grfm(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_grfm(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_grfm(p)


def test_grsq_roundtrip(tmp_path):
    seq = InterleavedSequence(torch.tensor([[1.5, -2.0], [0.25, 3.0], [0.0, 1.0]], dtype=torch.float64),
                              [1, 2, 3], [0, 1, 4], [0, 1, 1], [2, 3, IGNORE_INDEX], ["bos", "x", "x"])
    write_grsq(tmp_path / "s.grsq", seq)
    raw = (tmp_path / "s.grsq").read_bytes()
    assert raw[:4] == b"GRSQ" and struct.unpack("<II", raw[4:12]) == (3, 2)
    assert raw[-4:] == b"\xff\xff\xff\xff"
    assert len(raw) == 12 + 3 * 2 * 4 + 3 + 3 + 3 * 4
    back = read_grsq(tmp_path / "s.grsq")
    assert torch.equal(back["embeddings"].double(), seq.embeddings)
    assert back["provenance"] == [0, 1, 4] and back["loss_mask"] == [0, 1, 1]
    assert back["target_ids"] == [2, 3, IGNORE_INDEX]


def test_grck_roundtrip(tmp_path):
    state = {"a.weight": torch.randn(3, 4, dtype=torch.float64), "b": torch.tensor(2.0), "é": torch.zeros(0)}
    write_grck(tmp_path / "c.grck", state)
    back = read_grck(tmp_path / "c.grck")
    assert list(back) == list(state)
    for k in state:
        assert back[k].shape == state[k].shape
        assert torch.equal(back[k], state[k].float().double())


def test_config_parse():
    cfg = parse_config("# comment\nlr = 0.5\n\nschedule=constant  # trailing\nlr = 0.25\n")
    assert cfg == {"lr": "0.25", "schedule": "constant"}


def test_config_bad_line():
    with pytest.raises(ParseError) as ei:
        parse_config("lr = 1\nnot a pair\n")
    assert ei.value.offset == len("lr = 1\n")
